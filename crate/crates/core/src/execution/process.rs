use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

const TAIL_BYTES: u64 = 4096;

#[derive(Debug)]
pub(crate) struct Finished {
    /// `None` when the process was killed after the timeout.
    pub status: Option<ExitStatus>,
    pub tail: String,
}

impl Finished {
    pub fn timed_out(&self) -> bool {
        self.status.is_none()
    }

    pub fn success(&self) -> bool {
        self.status.is_some_and(|s| s.success())
    }
}

/// Remaining time until `deadline`, or `None` without one.
pub(crate) fn remaining(deadline: Option<Instant>) -> Option<Duration> {
    deadline.map(|d| d.saturating_duration_since(Instant::now()))
}

fn tail_of(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    file.seek(SeekFrom::Start(len.saturating_sub(TAIL_BYTES)))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

/// Runs `cmd` with stdout and stderr appended to `log`, killing it once
/// `timeout` elapses.
pub(crate) fn run_logged(cmd: &mut Command, log: &Path, timeout: Option<Duration>) -> io::Result<Finished> {
    if let Some(parent) = log.parent() {
        fs::create_dir_all(parent)?;
    }
    let out = fs::OpenOptions::new().create(true).append(true).open(log)?;
    let err = out.try_clone()?;
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::from(out))
        .stderr(Stdio::from(err))
        .spawn()?;
    let status = match timeout {
        Some(limit) => match child.wait_timeout(limit)? {
            Some(status) => Some(status),
            None => {
                child.kill()?;
                child.wait()?;
                None
            }
        },
        None => Some(child.wait()?),
    };
    Ok(Finished {
        status,
        tail: tail_of(log).unwrap_or_default(),
    })
}
