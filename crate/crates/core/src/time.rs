//! Virtual-clock durations. Everything internal is whole seconds.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid duration {input:?}: {reason}")]
pub struct DurationError {
    pub input: String,
    pub reason: String,
}

/// Parses `"90"`, `"90s"`, `"36h"`, `"7d"`, `"1d 2h"` and friends into
/// seconds. Sub-second parts are truncated.
pub fn parse_duration(input: &str) -> Result<u64, DurationError> {
    let s = input.trim();
    if let Ok(secs) = s.parse::<u64>() {
        return Ok(secs);
    }
    humantime::parse_duration(s)
        .map(|d| d.as_secs())
        .map_err(|e| DurationError { input: input.to_owned(), reason: e.to_string() })
}
