use crate::error::{Error, Result};

/// A set of labeled examples stored as a row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    input_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(input_dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::input("input_dim and num_classes must be positive"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                context: "labeled set features",
                expected: labels.len() * input_dim,
                found: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.input_dim);
        debug_assert!(y < self.num_classes);
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    /// Copies the given rows, in order, into a new set.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut out = Self::empty(self.input_dim, self.num_classes);
        out.features.reserve(rows.len() * self.input_dim);
        out.labels.reserve(rows.len());
        for &r in rows {
            out.push(self.row(r), self.label(r));
        }
        out
    }

    /// Per-class example counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Number of distinct labels present.
    pub fn label_support(&self) -> usize {
        self.histogram().iter().filter(|&&c| c > 0).count()
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}
