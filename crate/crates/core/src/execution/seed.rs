const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seed for one random-order run: 64-bit FNV-1a of `"base:iteration:run"`.
/// Without a base seed the run index itself is the seed.
pub fn derive_run_seed(base_seed: Option<u64>, iteration_index: u64, run_index: u64) -> u64 {
    match base_seed {
        Some(base) => fnv1a64(format!("{base}:{iteration_index}:{run_index}").as_bytes()),
        None => run_index,
    }
}
