//! Window scan orders: the permutations that flatten a `h x w` window into a
//! token sequence, and the tools to apply, invert and compare them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// `a`: row by row, left to right.
    HorizontalRaster,
    /// `b`: column by column, top to bottom.
    VerticalRaster,
    /// `c`: rows, alternating left-to-right and right-to-left.
    HorizontalZigzag,
    /// `d`: columns, alternating downward and upward.
    VerticalZigzag,
    /// The order of the inner direction traversed back to front.
    Reversed(Box<ScanDirection>),
    /// The inner direction with every column index mirrored.
    MirroredColumns(Box<ScanDirection>),
}

impl ScanDirection {
    /// The four orders used by the model, in fusion order.
    pub const PRODUCTION: [ScanDirection; 4] = [
        ScanDirection::HorizontalRaster,
        ScanDirection::VerticalRaster,
        ScanDirection::HorizontalZigzag,
        ScanDirection::VerticalZigzag,
    ];

    pub fn reversed(self) -> Self {
        ScanDirection::Reversed(Box::new(self))
    }

    pub fn mirrored(self) -> Self {
        ScanDirection::MirroredColumns(Box::new(self))
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanDirection::HorizontalRaster => write!(f, "a"),
            ScanDirection::VerticalRaster => write!(f, "b"),
            ScanDirection::HorizontalZigzag => write!(f, "c"),
            ScanDirection::VerticalZigzag => write!(f, "d"),
            ScanDirection::Reversed(inner) => write!(f, "{inner}_bi"),
            ScanDirection::MirroredColumns(inner) => write!(f, "{inner}_sy"),
        }
    }
}

impl FromStr for ScanDirection {
    type Err = Error;

    /// Parses `a`..`d` with any chain of `_bi` / `_sy` suffixes.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('_');
        let base = match parts.next() {
            Some("a") => ScanDirection::HorizontalRaster,
            Some("b") => ScanDirection::VerticalRaster,
            Some("c") => ScanDirection::HorizontalZigzag,
            Some("d") => ScanDirection::VerticalZigzag,
            _ => return Err(Error::InvalidArgument(format!("unknown scan direction `{s}`"))),
        };
        parts.try_fold(base, |dir, suffix| match suffix {
            "bi" => Ok(dir.reversed()),
            "sy" => Ok(dir.mirrored()),
            _ => Err(Error::InvalidArgument(format!("unknown scan direction `{s}`"))),
        })
    }
}

/// `order[t]` is the row-major grid index visited at step `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    height: usize,
    width: usize,
}

impl Permutation {
    /// Wraps an explicit order, checking that it is a bijection on the grid.
    pub fn from_order(order: Vec<usize>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid_shape(
                "permutation",
                &[height, width],
                "extents must be >= 1",
            ));
        }
        let n = height * width;
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument(format!(
                "order of length {} is not a permutation of 0..{n}",
                order.len()
            )));
        }
        Ok(Permutation { order, height, width })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `inverse()[g]` is the step at which grid index `g` is visited.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (t, &g) in self.order.iter().enumerate() {
            inv[g] = t;
        }
        inv
    }

    /// Step numbers laid out on the grid, one row per grid row.
    pub fn grid_steps(&self) -> Vec<Vec<usize>> {
        self.inverse().chunks(self.width).map(<[usize]>::to_vec).collect()
    }

    /// Number of consecutive pairs that are not 4-neighbors on the grid.
    pub fn non_adjacent_transitions(&self) -> usize {
        self.order
            .windows(2)
            .filter(|p| !are_neighbors(p[0], p[1], self.width))
            .count()
    }

    fn mirror_index(&self, g: usize) -> usize {
        let (r, c) = (g / self.width, g % self.width);
        r * self.width + (self.width - 1 - c)
    }
}

pub fn are_neighbors(p: usize, q: usize, width: usize) -> bool {
    let (pr, pc) = (p / width, p % width);
    let (qr, qc) = (q / width, q % width);
    pr.abs_diff(qr) + pc.abs_diff(qc) == 1
}

fn base_order(direction: &ScanDirection, height: usize, width: usize) -> Vec<usize> {
    let at = |r: usize, c: usize| r * width + c;
    match direction {
        ScanDirection::HorizontalRaster => (0..height * width).collect(),
        ScanDirection::VerticalRaster => (0..width).flat_map(|c| (0..height).map(move |r| at(r, c))).collect(),
        ScanDirection::HorizontalZigzag => (0..height)
            .flat_map(|r| (0..width).map(move |i| at(r, if r % 2 == 0 { i } else { width - 1 - i })))
            .collect(),
        ScanDirection::VerticalZigzag => (0..width)
            .flat_map(|c| (0..height).map(move |i| at(if c % 2 == 0 { i } else { height - 1 - i }, c)))
            .collect(),
        ScanDirection::Reversed(inner) => {
            let mut order = base_order(inner, height, width);
            order.reverse();
            order
        }
        ScanDirection::MirroredColumns(inner) => base_order(inner, height, width)
            .into_iter()
            .map(|g| at(g / width, width - 1 - g % width))
            .collect(),
    }
}

pub fn build_permutation(direction: &ScanDirection, height: usize, width: usize) -> Result<Permutation> {
    if height == 0 || width == 0 {
        return Err(Error::invalid_shape(
            "build_permutation",
            &[height, width],
            "extents must be >= 1",
        ));
    }
    Ok(Permutation {
        order: base_order(direction, height, width),
        height,
        width,
    })
}

type CacheKey = (ScanDirection, usize, usize);

/// Shared, immutable permutation for `(direction, height, width)`, built on
/// first use.
pub fn cached_permutation(direction: &ScanDirection, height: usize, width: usize) -> Result<Arc<Permutation>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<Permutation>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (direction.clone(), height, width);
    if let Some(p) = cache.lock().expect("scan cache poisoned").get(&key) {
        return Ok(Arc::clone(p));
    }
    let perm = Arc::new(build_permutation(direction, height, width)?);
    let mut guard = cache.lock().expect("scan cache poisoned");
    Ok(Arc::clone(guard.entry(key).or_insert(perm)))
}

/// Flattens an `h x w x d` window into a `T x d` sequence in scan order.
pub fn apply_scan<T: Element>(window: &Tensor<T>, perm: &Permutation) -> Result<Tensor<T>> {
    let shape = window.shape();
    if shape.len() != 3 || shape[0] != perm.height || shape[1] != perm.width {
        return Err(Error::shape("apply_scan", shape, &[perm.height, perm.width]));
    }
    let d = shape[2];
    let src = window.data();
    let mut out = Vec::with_capacity(src.len());
    for &g in &perm.order {
        out.extend_from_slice(&src[g * d..(g + 1) * d]);
    }
    Tensor::new(vec![perm.len(), d], out)
}

/// Places a `T x d` sequence back onto its `h x w x d` window.
pub fn invert_scan<T: Element>(sequence: &Tensor<T>, perm: &Permutation) -> Result<Tensor<T>> {
    let shape = sequence.shape();
    if shape.len() != 2 || shape[0] != perm.len() {
        return Err(Error::shape("invert_scan", shape, &[perm.len()]));
    }
    let d = shape[1];
    let src = sequence.data();
    let mut out = vec![T::zero(); src.len()];
    for (t, &g) in perm.order.iter().enumerate() {
        out[g * d..(g + 1) * d].copy_from_slice(&src[t * d..(t + 1) * d]);
    }
    Tensor::new(vec![perm.height, perm.width, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Identical,
    Reversal,
    ColumnMirror,
    Unrelated,
}

/// How `q` relates to `p`. Checked in the order listed on [`Relation`], so
/// on degenerate grids where several hold the earliest wins.
pub fn classify_relation(p: &Permutation, q: &Permutation) -> Result<Relation> {
    if p.height != q.height || p.width != q.width {
        return Err(Error::shape(
            "classify_relation",
            &[p.height, p.width],
            &[q.height, q.width],
        ));
    }
    if p.order == q.order {
        return Ok(Relation::Identical);
    }
    if p.order.iter().rev().eq(q.order.iter()) {
        return Ok(Relation::Reversal);
    }
    if p.order.iter().map(|&g| p.mirror_index(g)).eq(q.order.iter().copied()) {
        return Ok(Relation::ColumnMirror);
    }
    Ok(Relation::Unrelated)
}
