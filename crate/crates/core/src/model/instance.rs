use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Segments};

/// A query fused with a support set: row `i` is `[support_i, query]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedInstance {
    pairs: Matrix,
    pub label: Option<bool>,
    pub task: usize,
}

impl PairedInstance {
    pub fn new(support: &Matrix, query: &[f64], label: Option<bool>, task: usize) -> Result<Self> {
        let n = query.len();
        if support.rows() == 0 {
            return Err(Error::InvalidArgument("support set is empty".into()));
        }
        if support.cols() != n || n == 0 {
            return Err(Error::dim(
                "paired_instance",
                format!("support width {} vs query width {n}", support.cols()),
            ));
        }
        let mut pairs = Matrix::zeros(support.rows(), 2 * n);
        for (i, s) in support.iter_rows().enumerate() {
            let row = pairs.row_mut(i);
            row[..n].copy_from_slice(s);
            row[n..].copy_from_slice(query);
        }
        Ok(PairedInstance { pairs, label, task })
    }

    /// Wraps pre-built pairs, checking that every second half is the same query.
    pub fn from_pairs(pairs: Matrix, label: Option<bool>, task: usize) -> Result<Self> {
        if pairs.rows() == 0 {
            return Err(Error::InvalidArgument("paired instance needs k >= 1".into()));
        }
        if pairs.cols() == 0 || !pairs.cols().is_multiple_of(2) {
            return Err(Error::dim(
                "paired_instance",
                format!("pair width {} is not even", pairs.cols()),
            ));
        }
        let n = pairs.cols() / 2;
        let q = &pairs.row(0)[n..];
        if pairs.iter_rows().any(|r| &r[n..] != q) {
            return Err(Error::InvalidArgument(
                "pairs do not share a single query vector".into(),
            ));
        }
        Ok(PairedInstance { pairs, label, task })
    }

    pub fn pairs(&self) -> &Matrix {
        &self.pairs
    }

    pub fn set_size(&self) -> usize {
        self.pairs.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.pairs.cols() / 2
    }

    pub fn query(&self) -> &[f64] {
        &self.pairs.row(0)[self.feature_dim()..]
    }

    pub fn support(&self) -> Matrix {
        let n = self.feature_dim();
        let mut m = Matrix::zeros(self.set_size(), n);
        for i in 0..self.set_size() {
            m.row_mut(i).copy_from_slice(&self.pairs.row(i)[..n]);
        }
        m
    }

    /// Reorders pairs; `order` must be a permutation of `0..k`.
    pub fn permuted(&self, order: &[usize]) -> PairedInstance {
        PairedInstance {
            pairs: self.pairs.select_rows(order),
            label: self.label,
            task: self.task,
        }
    }
}

/// Several paired instances stacked row-wise, one segment per instance.
#[derive(Clone, Debug)]
pub struct SetBatch {
    pub(crate) rows: Matrix,
    pub(crate) segs: Rc<Segments>,
    pub(crate) labels: Vec<bool>,
    sizes: Vec<usize>,
}

impl SetBatch {
    pub fn with_feature_dim(n: usize) -> Self {
        SetBatch {
            rows: Matrix::zeros(0, 2 * n),
            segs: Rc::new(Segments::from_sizes(&[]).unwrap()),
            labels: Vec::new(),
            sizes: Vec::new(),
        }
    }

    pub fn from_instances(instances: &[PairedInstance]) -> Result<Self> {
        let n = instances
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
            .feature_dim();
        let mut b = SetBatch::with_feature_dim(n);
        for inst in instances {
            if inst.feature_dim() != n {
                return Err(Error::dim("batch", "mixed feature widths".to_string()));
            }
            for r in inst.pairs.iter_rows() {
                b.rows.push_row(r)?;
            }
            b.sizes.push(inst.set_size());
            b.labels.push(inst.label.unwrap_or(false));
        }
        b.finish();
        Ok(b)
    }

    /// Appends one instance built from support rows and a query.
    pub fn push<'a>(
        &mut self,
        support: impl IntoIterator<Item = &'a [f64]>,
        query: &[f64],
        label: bool,
    ) -> Result<()> {
        let n = self.rows.cols() / 2;
        if query.len() != n {
            return Err(Error::dim("batch", format!("query width {} vs {n}", query.len())));
        }
        let mut k = 0;
        let mut row = vec![0.0; 2 * n];
        row[n..].copy_from_slice(query);
        for s in support {
            if s.len() != n {
                return Err(Error::dim("batch", format!("support width {} vs {n}", s.len())));
            }
            row[..n].copy_from_slice(s);
            self.rows.push_row(&row)?;
            k += 1;
        }
        if k == 0 {
            return Err(Error::InvalidArgument("support set is empty".into()));
        }
        self.sizes.push(k);
        self.labels.push(label);
        Ok(())
    }

    /// Rebuilds segment offsets after pushes.
    pub fn finish(&mut self) {
        self.segs = Rc::new(Segments::from_sizes(&self.sizes).expect("sizes are non-zero"));
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.cols() / 2
    }
}
