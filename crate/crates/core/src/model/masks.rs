use crate::error::{Error, Result};
use crate::model::config::MaskMode;

/// Row-major boolean allow matrix, `rows x cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }

    /// Number of leading allowed keys in row `r` (rows are prefixes).
    pub fn cap(&self, r: usize) -> usize {
        self.row(r).iter().take_while(|&&a| a).count()
    }
}

pub fn build_causal_mask(t: usize) -> Result<AttentionMask> {
    if t == 0 {
        return Err(Error::Empty("causal mask over zero timesteps"));
    }
    let allow = (0..t * t).map(|i| i % t <= i / t).collect();
    Ok(AttentionMask {
        rows: t,
        cols: t,
        allow,
    })
}

/// Checks that 1-based half-open intervals tile `[1, t + 1)`.
pub fn validate_intervals(intervals: &[(usize, usize)], t: usize) -> Result<()> {
    if intervals.is_empty() {
        return Err(Error::Interval("no intervals".into()));
    }
    let mut next = 1;
    for &(s, e) in intervals {
        if s != next || e <= s {
            return Err(Error::Interval(format!("[{s}, {e}) does not continue from {next}")));
        }
        next = e;
    }
    if next != t + 1 {
        return Err(Error::Interval(format!("intervals end at {next}, expected {}", t + 1)));
    }
    Ok(())
}

pub fn cross_cap(mode: MaskMode, (start, end): (usize, usize), t: usize) -> usize {
    match mode {
        MaskMode::Onset => start.saturating_sub(1).max(1),
        MaskMode::Execution => end - 1,
        MaskMode::Unmasked => t,
    }
}

/// One row per instruction: row `i` allows `z_1..z_cap(i)`.
pub fn build_instruction_cross_mask(intervals: &[(usize, usize)], t: usize, mode: MaskMode) -> Result<AttentionMask> {
    validate_intervals(intervals, t)?;
    let mut allow = Vec::with_capacity(intervals.len() * t);
    for &iv in intervals {
        let cap = cross_cap(mode, iv, t);
        allow.extend((0..t).map(|c| c < cap));
    }
    Ok(AttentionMask {
        rows: intervals.len(),
        cols: t,
        allow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_examples() {
        let m = build_causal_mask(3).unwrap();
        assert_eq!(m.allow, vec![true, false, false, true, true, false, true, true, true]);
        assert_eq!(build_causal_mask(1).unwrap().allow, vec![true]);
        assert!(build_causal_mask(0).is_err());
    }

    #[test]
    fn cross_examples() {
        let iv = [(1, 3), (3, 6)];
        let m = build_instruction_cross_mask(&iv, 5, MaskMode::Execution).unwrap();
        assert_eq!((m.cap(0), m.cap(1)), (2, 5));
        let m = build_instruction_cross_mask(&iv, 5, MaskMode::Onset).unwrap();
        assert_eq!((m.cap(0), m.cap(1)), (1, 2));
        let m = build_instruction_cross_mask(&[(1, 6)], 5, MaskMode::Execution).unwrap();
        assert_eq!(m.cap(0), 5);
        assert!(build_instruction_cross_mask(&[(1, 3), (4, 6)], 5, MaskMode::Onset).is_err());
        assert!(build_instruction_cross_mask(&[(1, 3), (3, 7)], 5, MaskMode::Onset).is_err());
    }
}
