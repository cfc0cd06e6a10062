use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ScanError;
use crate::raster::{WindowParams, WindowRef};

const MAGIC: &[u8; 4] = b"ISGR";
const VERSION: u16 = 1;

/// Calibrated fresh-impact posteriors for every window position of one
/// observation, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    observation_id: String,
    params: WindowParams,
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ScoreGrid {
    pub fn new(
        observation_id: impl Into<String>,
        params: WindowParams,
        rows: usize,
        cols: usize,
        values: Vec<f32>,
    ) -> Result<Self, ScanError> {
        let observation_id = observation_id.into();
        if values.len() != rows * cols {
            return Err(ScanError::Format(format!(
                "grid `{observation_id}`: {} values for {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ScanError::Format(format!(
                "grid `{observation_id}`: posterior {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            observation_id,
            params,
            rows,
            cols,
            values,
        })
    }

    pub fn observation_id(&self) -> &str {
        &self.observation_id
    }

    pub fn params(&self) -> WindowParams {
        self.params
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn window(&self, row: usize, col: usize) -> WindowRef {
        self.params.window_at(&self.observation_id, row, col)
    }

    /// `(grid_row, grid_col, p_pos)` for every cell.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &p)| (i / self.cols.max(1), i % self.cols.max(1), p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.observation_id.as_bytes();
        let mut out = Vec::with_capacity(4 + 2 + 2 + id.len() + 16 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        for v in [self.rows, self.cols, self.params.stride, self.params.size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScanError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(ScanError::Format("bad score-grid magic".into()));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(ScanError::Format(format!(
                "unsupported score-grid version {version}"
            )));
        }
        let id_len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|e| ScanError::Format(format!("observation id: {e}")))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let stride = cur.u32()? as usize;
        let size = cur.u32()? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
        }
        if cur.pos != bytes.len() {
            return Err(ScanError::Format("trailing bytes after score grid".into()));
        }
        let params =
            WindowParams::new(size, stride).map_err(|e| ScanError::Format(e.to_string()))?;
        Self::new(id, params, rows, cols, values)
    }

    /// SHA-256 of the serialized grid, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ScanError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ScanError::Format("truncated score grid".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ScanError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ScanError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Entry of the JSON index written next to the grid files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridIndexEntry {
    pub observation_id: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let g = ScoreGrid::new("ab", WindowParams::default(), 1, 2, vec![0.25, 1.0]).unwrap();
        let b = g.to_bytes();
        assert_eq!(&b[..4], b"ISGR");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..10], b"ab");
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &2u32.to_le_bytes());
        assert_eq!(&b[18..22], &75u32.to_le_bytes());
        assert_eq!(&b[22..26], &300u32.to_le_bytes());
        assert_eq!(&b[26..30], &0.25f32.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn rejects_corruption() {
        let g = ScoreGrid::new("x", WindowParams::default(), 1, 1, vec![0.5]).unwrap();
        let b = g.to_bytes();
        assert!(ScoreGrid::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(ScoreGrid::from_bytes(&bad).is_err());
        assert!(ScoreGrid::new("x", WindowParams::default(), 1, 1, vec![1.5]).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(id in "[A-Za-z0-9_]{1,24}", rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let values: Vec<f32> = (0..rows * cols).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f32) / 999.0).collect();
            let g = ScoreGrid::new(id, WindowParams::new(300, 75).unwrap(), rows, cols, values).unwrap();
            prop_assert_eq!(ScoreGrid::from_bytes(&g.to_bytes()).unwrap(), g);
        }
    }
}
