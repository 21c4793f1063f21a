//! Run-length coding of binary occupancy grids.
//!
//! A grid is flattened row-major and stored as alternating run lengths,
//! starting with a run of free cells (0). The first run may be empty, so
//! `[0, 3, 5]` is three buildings followed by five free cells.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("runs cover {got} cells, grid has {want}")]
    Length { got: u64, want: u64 },
    #[error("run {index} is empty; only the first run may be zero")]
    EmptyRun { index: usize },
}

pub fn encode(cells: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for &c in cells {
        let v = u8::from(c != 0);
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    if len > 0 || runs.is_empty() {
        runs.push(len);
    }
    runs
}

pub fn decode(runs: &[u32], cells: usize) -> Result<Vec<u8>, RleError> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != cells as u64 {
        return Err(RleError::Length { got: total, want: cells as u64 });
    }
    if let Some(index) = runs.iter().skip(1).position(|&r| r == 0) {
        return Err(RleError::EmptyRun { index: index + 1 });
    }
    let mut out = Vec::with_capacity(cells);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    Ok(out)
}
