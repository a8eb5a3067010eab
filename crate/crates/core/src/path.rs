//! Càdlàg paths on a group or on `ℝᵐ`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StosymError};
use crate::lie_groups::GroupDescriptor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PathSpace {
    Group(GroupDescriptor),
    Euclidean(usize),
}

impl PathSpace {
    pub fn dim(&self) -> usize {
        match self {
            PathSpace::Group(g) => g.coordinate_dim(),
            PathSpace::Euclidean(m) => *m,
        }
    }

    pub fn group(&self) -> Option<&GroupDescriptor> {
        match self {
            PathSpace::Group(g) => Some(g),
            PathSpace::Euclidean(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathStyle {
    /// Piecewise constant; every knot after the first is a jump.
    DiscreteJump,
    /// Samples of a path on a grid; only flagged knots carry jumps.
    GridSampled,
}

/// Knots `times[0] = 0 < times[1] < …` with values, plus optional jump records.
///
/// For grid-sampled paths `jumps[ℓ] = Some(J)` means the value at `times[ℓ]`
/// contains the jump `J = Z_ℓ · Z_{ℓ−}⁻¹` on top of the continuous motion over
/// the preceding step. For discrete-jump paths a recorded `jumps[ℓ]` is the
/// exact increment and takes precedence over recomputing it from the values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CadlagPath {
    pub space: PathSpace,
    pub style: PathStyle,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub jumps: Vec<Option<Vec<f64>>>,
}

impl CadlagPath {
    pub fn new(space: PathSpace, style: PathStyle, times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = times.len();
        let path = Self { space, style, times, values, jumps: vec![None; n] };
        path.validate()?;
        Ok(path)
    }

    pub fn with_jumps(mut self, jumps: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if jumps.len() != self.times.len() {
            return Err(StosymError::Dimension { expected: self.times.len(), got: jumps.len() });
        }
        self.jumps = jumps;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(StosymError::InvalidParameter("path has no knots".into()));
        }
        if self.times[0] != 0.0 {
            return Err(StosymError::InvalidParameter("path must start at t = 0".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(StosymError::InvalidParameter("path times must be strictly increasing".into()));
        }
        if self.values.len() != self.times.len() {
            return Err(StosymError::Dimension { expected: self.times.len(), got: self.values.len() });
        }
        let d = self.space.dim();
        for v in &self.values {
            if v.len() != d {
                return Err(StosymError::Dimension { expected: d, got: v.len() });
            }
        }
        for j in self.jumps.iter().flatten() {
            if j.len() != d {
                return Err(StosymError::Dimension { expected: d, got: j.len() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn is_jump(&self, step: usize) -> bool {
        match self.style {
            PathStyle::DiscreteJump => step > 0,
            PathStyle::GridSampled => self.jumps[step].is_some(),
        }
    }

    pub fn final_value(&self) -> &[f64] {
        self.values.last().expect("validated path is nonempty")
    }

    /// Value at the largest knot `≤ t` (knots are where jumps are recorded).
    pub fn value_at(&self, t: f64) -> &[f64] {
        let idx = match self.times.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        &self.values[idx]
    }

    /// Increment `Z_ℓ · Z_{ℓ−1}⁻¹` (or the coordinate difference on `ℝᵐ`).
    pub fn increment(&self, step: usize) -> Result<Vec<f64>> {
        if self.style == PathStyle::DiscreteJump {
            if let Some(j) = &self.jumps[step] {
                return Ok(j.clone());
            }
        }
        let (a, b) = (&self.values[step], &self.values[step - 1]);
        match &self.space {
            PathSpace::Group(g) => g.jump_coords(a, b),
            PathSpace::Euclidean(_) => Ok(a.iter().zip(b).map(|(x, y)| x - y).collect()),
        }
    }

    /// Re-encodes a discrete-jump path as a grid path whose every step is flagged.
    pub fn as_grid_with_jump_flags(&self) -> Result<CadlagPath> {
        let mut jumps = vec![None; self.len()];
        for (s, j) in jumps.iter_mut().enumerate().skip(1) {
            *j = Some(self.increment(s)?);
        }
        Ok(CadlagPath {
            space: self.space.clone(),
            style: PathStyle::GridSampled,
            times: self.times.clone(),
            values: self.values.clone(),
            jumps,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("coord_{i}")));
        wr.write_record(&header)?;
        for (t, v) in self.times.iter().zip(&self.values) {
            let mut rec = vec![format!("{t:.17e}")];
            rec.extend(v.iter().map(|x| format!("{x:.17e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, file: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(file)?)
    }

    /// Reads `t, coord_0, …` rows. Space and style must be supplied by the caller.
    pub fn read_csv<R: std::io::Read>(r: R, space: PathSpace, style: PathStyle) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let mut it =
                rec.iter().map(|s| s.trim().parse::<f64>().map_err(|e| StosymError::InvalidParameter(format!("bad number {s:?}: {e}"))));
            times.push(it.next().ok_or_else(|| StosymError::InvalidParameter("empty row".into()))??);
            values.push(it.collect::<Result<Vec<f64>>>()?);
        }
        Self::new(space, style, times, values)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: CadlagPath = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CadlagPath {
        CadlagPath::new(
            PathSpace::Euclidean(2),
            PathStyle::DiscreteJump,
            vec![0.0, 1.0, 2.0],
            vec![vec![0.0, 0.0], vec![1.0, -1.0], vec![0.5, 2.0]],
        )
        .unwrap()
    }

    #[test]
    fn value_at_is_right_continuous_step() {
        let p = sample();
        assert_eq!(p.value_at(0.99), &[0.0, 0.0]);
        assert_eq!(p.value_at(1.0), &[1.0, -1.0]);
        assert_eq!(p.value_at(7.0), &[0.5, 2.0]);
    }

    #[test]
    fn rejects_bad_times() {
        let r = CadlagPath::new(PathSpace::Euclidean(1), PathStyle::GridSampled, vec![0.0, 1.0, 1.0], vec![vec![0.0]; 3]);
        assert!(r.is_err());
        let r = CadlagPath::new(PathSpace::Euclidean(1), PathStyle::GridSampled, vec![0.5], vec![vec![0.0]]);
        assert!(r.is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,coord_0,coord_1"));
        let q = CadlagPath::read_csv(&buf[..], p.space.clone(), p.style).unwrap();
        assert_eq!(p.times, q.times);
        assert_eq!(p.values, q.values);
        let r = CadlagPath::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, r);
    }
}
