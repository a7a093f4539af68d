use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Guide points with the view each one was generated from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointBatch {
    pub positions: Vec<[f64; 3]>,
    pub source_view: Vec<usize>,
    /// Whether the point was perturbed by the noise model. Evaluation only:
    /// nothing in training reads it.
    pub gt_noise_label: Option<Vec<bool>>,
}

impl PointBatch {
    pub fn new(positions: Vec<[f64; 3]>, source_view: Vec<usize>, gt_noise_label: Option<Vec<bool>>) -> Result<Self> {
        let b = Self {
            positions,
            source_view,
            gt_noise_label,
        };
        b.check_lengths()?;
        if let Some(i) = b.positions.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has non-finite coordinates")));
        }
        Ok(b)
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.positions.len();
        if self.source_view.len() != n || self.gt_noise_label.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Shape(format!(
                "point batch with {n} positions, {} views, {:?} labels",
                self.source_view.len(),
                self.gt_noise_label.as_ref().map(Vec::len)
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rejects source views outside `0..n_views`.
    pub fn check_views(&self, n_views: usize) -> Result<()> {
        match self.source_view.iter().position(|&v| v >= n_views) {
            Some(i) => Err(Error::InvalidInput(format!(
                "point {i} references view {} of {n_views}",
                self.source_view[i]
            ))),
            None => Ok(()),
        }
    }

    /// Point indices grouped by source view.
    pub fn view_subsets(&self, n_views: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_views];
        for (i, &v) in self.source_view.iter().enumerate() {
            if v < n_views {
                out[v].push(i);
            }
        }
        out
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            source_view: idx.iter().map(|&i| self.source_view[i]).collect(),
            gt_noise_label: self.gt_noise_label.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// ASCII PLY with `x y z source_view` and, when present, `gt_noise`.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        self.check_lengths()?;
        let mut s = String::with_capacity(64 * self.len() + 256);
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.len());
        s.push_str("property double x\nproperty double y\nproperty double z\nproperty int source_view\n");
        if self.gt_noise_label.is_some() {
            s.push_str("property uchar gt_noise\n");
        }
        s.push_str("end_header\n");
        for i in 0..self.len() {
            let p = self.positions[i];
            let _ = write!(s, "{} {} {} {}", p[0], p[1], p[2], self.source_view[i]);
            if let Some(l) = &self.gt_noise_label {
                let _ = write!(s, " {}", u8::from(l[i]));
            }
            s.push('\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Reads an ASCII PLY vertex element. Only `x y z` are required; a
    /// missing `source_view` defaults to view 0.
    pub fn read_ply(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let bad = |detail: String| Error::Format {
            kind: "ply",
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing ply magic".into()));
        }
        let mut count = None;
        let mut props: Vec<String> = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = lines.next().ok_or_else(|| bad("header not terminated".into()))?.trim();
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["end_header"] => break,
                ["format", fmt, ..] if *fmt != "ascii" => return Err(bad(format!("unsupported format {fmt}"))),
                ["element", "vertex", n] => {
                    count = Some(n.parse::<usize>().map_err(|e| bad(format!("vertex count: {e}")))?);
                    in_vertex = true;
                }
                ["element", ..] => in_vertex = false,
                ["property", _, name] if in_vertex => props.push((*name).to_string()),
                _ => {}
            }
        }
        let n = count.ok_or_else(|| bad("no vertex element".into()))?;
        let col = |name: &str| props.iter().position(|p| p == name);
        let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
            return Err(bad("vertex element lacks x, y or z".into()));
        };
        let iv = col("source_view");
        let il = col("gt_noise");
        let mut positions = Vec::with_capacity(n);
        let mut views = Vec::with_capacity(n);
        let mut labels = il.map(|_| Vec::with_capacity(n));
        for k in 0..n {
            let line = lines.next().ok_or_else(|| bad(format!("expected {n} vertices, found {k}")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != props.len() {
                return Err(bad(format!("vertex {k}: {} values for {} properties", vals.len(), props.len())));
            }
            let num = |i: usize| vals[i].parse::<f64>().map_err(|e| bad(format!("vertex {k}: {e}")));
            positions.push([num(ix)?, num(iy)?, num(iz)?]);
            views.push(match iv {
                Some(i) => vals[i].parse::<usize>().map_err(|e| bad(format!("vertex {k} view: {e}")))?,
                None => 0,
            });
            if let (Some(i), Some(l)) = (il, labels.as_mut()) {
                l.push(num(i)? != 0.0);
            }
        }
        Self::new(positions, views, labels)
    }
}
