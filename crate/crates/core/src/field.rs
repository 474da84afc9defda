//! Dense row-major real and complex arrays.
//!
//! A [`Field`] is the carrier for weather states, token grids and gradients.
//! The last axis is the fastest-varying one, so a `(time, lat, lon, channel)`
//! field stores all channels of one grid point contiguously.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

/// Optional semantic label for an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisName {
    Batch,
    Time,
    Lat,
    Lon,
    Channel,
}

/// Row-major strides (in elements) for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Advances a row-major multi-index; returns false after the last index.
pub(crate) fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for a in (0..shape.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return true;
        }
        idx[a] = 0;
    }
    false
}

/// Calls `f` with every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&n| n == 0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        if !next_index(&mut idx, shape) {
            break;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    data: Vec<f64>,
    axis_names: Option<Vec<AxisName>>,
}

impl Field {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            axis_names: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            axis_names: None,
        }
    }

    /// Builds a field by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let mut idx = vec![0; shape.len()];
            loop {
                data.push(f(&idx));
                if !next_index(&mut idx, shape) {
                    break;
                }
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
            axis_names: None,
        }
    }

    pub fn with_axis_names(mut self, names: Vec<AxisName>) -> Result<Self> {
        if names.len() != self.shape.len() {
            return arg_err(format!(
                "{} axis names for a rank-{} field",
                names.len(),
                self.shape.len()
            ));
        }
        self.axis_names = Some(names);
        Ok(self)
    }

    pub fn axis_names(&self) -> Option<&[AxisName]> {
        self.axis_names.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&x, &n)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(x < n, "index {x} out of range on axis {i}");
            off = off * n + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Field> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            ));
        }
        let axis_names = if shape == self.shape.as_slice() {
            self.axis_names.clone()
        } else {
            None
        };
        Ok(Field {
            shape: shape.to_vec(),
            data: self.data.clone(),
            axis_names,
        })
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Field> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank {
            return shape_err(format!("permutation {order:?} for rank {rank}"));
        }
        for &a in order {
            if a >= rank || seen[a] {
                return shape_err(format!("{order:?} is not a permutation of 0..{rank}"));
            }
            seen[a] = true;
        }
        if order.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let step: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        if !self.data.is_empty() {
            let mut idx = vec![0; rank];
            loop {
                let off: usize = idx.iter().zip(&step).map(|(i, s)| i * s).sum();
                data.push(self.data[off]);
                if !next_index(&mut idx, &out_shape) {
                    break;
                }
            }
        }
        let axis_names = self
            .axis_names
            .as_ref()
            .map(|n| order.iter().map(|&a| n[a]).collect());
        Ok(Field {
            shape: out_shape,
            data,
            axis_names,
        })
    }

    /// Permutes and merges axes. Each group lists input axes that become one
    /// output axis; the concatenation of groups must be a permutation of all
    /// axes. Identity groupings leave the data untouched.
    pub fn regroup(&self, groups: &[Vec<usize>]) -> Result<Field> {
        let order: Vec<usize> = groups.iter().flatten().copied().collect();
        if groups.iter().any(|g| g.is_empty()) {
            return shape_err("empty axis group");
        }
        let permuted = self.permute(&order)?;
        let shape: Vec<usize> = groups
            .iter()
            .map(|g| g.iter().map(|&a| self.shape[a]).product())
            .collect();
        if groups.iter().all(|g| g.len() == 1) {
            return Ok(permuted);
        }
        permuted.reshape(&shape)
    }

    /// Circular shift along `axis`: `out[i] = self[(i - shift) mod n]`.
    pub fn roll(&self, axis: usize, shift: isize) -> Field {
        let n = self.shape[axis];
        if n == 0 {
            return self.clone();
        }
        let s = shift.rem_euclid(n as isize) as usize;
        if s == 0 {
            return self.clone();
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let dst = base + ((i + s) % n) * inner;
                let src = base + i * inner;
                data[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Field {
            shape: self.shape.clone(),
            data,
            axis_names: self.axis_names.clone(),
        }
    }

    /// Extracts index `index` of `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Field {
        let n = self.shape[axis];
        assert!(index < n, "select index {index} out of range {n}");
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            data.extend_from_slice(&self.data[start..start + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let axis_names = self.axis_names.as_ref().map(|names| {
            let mut names = names.clone();
            names.remove(axis);
            names
        });
        Field {
            shape,
            data,
            axis_names,
        }
    }

    /// Stacks equally shaped fields along a new leading axis.
    pub fn stack(parts: &[Field]) -> Result<Field> {
        let Some(first) = parts.first() else {
            return arg_err("stack of zero fields");
        };
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return shape_err(format!("stack: {:?} vs {:?}", p.shape, first.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Field::new(shape, data)
    }

    fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Field {
            shape: self.shape.clone(),
            data,
            axis_names: self.axis_names.clone(),
        })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            axis_names: self.axis_names.clone(),
        }
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map(|v| v * s)
    }

    pub fn gelu(&self) -> Field {
        self.map(gelu)
    }

    pub fn relu(&self) -> Field {
        self.map(relu)
    }

    /// Adds `bias` (one value per entry of the trailing axis).
    pub fn add_bias(&self, bias: &[f64]) -> Result<Field> {
        let c = self.trailing()?;
        if bias.len() != c {
            return shape_err(format!("bias of {} for trailing extent {c}", bias.len()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    fn trailing(&self) -> Result<usize> {
        match self.shape.last() {
            Some(&c) => Ok(c),
            None => shape_err("operation needs at least one axis"),
        }
    }

    /// `(..., K) x (K, M) -> (..., M)`.
    pub fn matmul(&self, w: &Field) -> Result<Field> {
        let k = self.trailing()?;
        if w.rank() != 2 || w.shape[0] != k {
            return shape_err(format!(
                "matmul of trailing extent {k} against {:?}",
                w.shape
            ));
        }
        let m = w.shape[1];
        let rows = if k == 0 { 0 } else { self.data.len() / k };
        let mut data = vec![0.0; rows * m];
        gemm(rows, k, m, &self.data, &w.data, &mut data, false);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = m;
        Field::new(shape, data)
    }

    /// Normalizes every lane of `axis` to zero mean and unit variance, then
    /// applies the learnable `gain` and `bias`.
    pub fn layer_norm(&self, axis: usize, gain: &[f64], bias: &[f64], eps: f64) -> Result<Field> {
        if axis >= self.rank() {
            return shape_err(format!("layer_norm axis {axis} on rank {}", self.rank()));
        }
        let n = self.shape[axis];
        if gain.len() != n || bias.len() != n {
            return shape_err(format!(
                "layer_norm over extent {n} with gain {} / bias {}",
                gain.len(),
                bias.len()
            ));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let mean = (0..n).map(|c| self.data[at(c)]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|c| (self.data[at(c)] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for c in 0..n {
                    out.data[at(c)] = (self.data[at(c)] - mean) * rstd * gain[c] + bias[c];
                }
            }
        }
        Ok(out)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `0.5 (1 + tanh(u))` written as a logistic to avoid a libm tanh call.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

/// tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `c (rows x m) (+)= a (rows x k) * b (k x m)`, all row-major.
pub(crate) fn gemm(rows: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    if rows == 0 || m == 0 {
        return;
    }
    if k == 0 {
        if !acc {
            c.fill(0.0);
        }
        return;
    }
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: slices are sized rows*k, k*m and rows*m with row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            m as isize,
            1,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c (k x m) += a^T * g` where `a` is `rows x k` and `g` is `rows x m`.
pub(crate) fn gemm_at_b(rows: usize, k: usize, m: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    if rows == 0 || k == 0 || m == 0 {
        return;
    }
    // SAFETY: `a` read transposed through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k,
            rows,
            m,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            m as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c (rows x k) += g (rows x m) * b^T` where `b` is `k x m`.
pub(crate) fn gemm_a_bt(rows: usize, k: usize, m: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    if rows == 0 || k == 0 || m == 0 {
        return;
    }
    // SAFETY: `b` read transposed through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            m,
            k,
            1.0,
            g.as_ptr(),
            m as isize,
            1,
            b.as_ptr(),
            1,
            m as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// Strided matrix view: element `(r, c)` lives at `off + r * rs + c * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(off: usize, rs: usize) -> Self {
        Self { off, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rs: self.cs, cs: self.rs, ..self }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = beta c + a b` over strided views, `a` is `rows x k`, `b` is `k x m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    rows: usize,
    k: usize,
    m: usize,
    a: (&[f64], View),
    b: (&[f64], View),
    beta: f64,
    c: (&mut [f64], View),
) {
    if rows == 0 || k == 0 || m == 0 {
        return;
    }
    let (a, av) = a;
    let (b, bv) = b;
    let (c, cv) = c;
    assert!(av.last(rows, k) < a.len() && bv.last(k, m) < b.len() && cv.last(rows, m) < c.len());
    // SAFETY: the asserts above bound every element reached through the strides.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            m,
            1.0,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Complex array with interleaved `(re, im)` storage in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ComplexField {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; 2 * n],
        }
    }

    pub fn from_complex(shape: Vec<usize>, values: &[Complex64]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return shape_err(format!("shape {shape:?} vs {} values", values.len()));
        }
        let data = values.iter().flat_map(|c| [c.re, c.im]).collect();
        Ok(Self { shape, data })
    }

    /// Wraps a real field whose trailing axis of extent 2 holds `(re, im)`.
    pub fn from_pairs(f: Field) -> Result<Self> {
        match f.shape().split_last() {
            Some((2, rest)) => {
                let shape = rest.to_vec();
                Ok(Self {
                    shape,
                    data: f.into_data(),
                })
            }
            _ => shape_err(format!("expected trailing (re, im) axis, got {:?}", f.shape())),
        }
    }

    /// The same storage viewed as a real field with a trailing extent-2 axis.
    pub fn into_pairs(self) -> Field {
        let mut shape = self.shape;
        shape.push(2);
        Field::new(shape, self.data).expect("pair storage is consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize) -> Complex64 {
        Complex64::new(self.data[2 * i], self.data[2 * i + 1])
    }

    pub fn put(&mut self, i: usize, v: Complex64) {
        self.data[2 * i] = v.re;
        self.data[2 * i + 1] = v.im;
    }

    pub fn get(&self, idx: &[usize]) -> Complex64 {
        let mut off = 0;
        for (&x, &n) in idx.iter().zip(&self.shape) {
            off = off * n + x;
        }
        self.at(off)
    }

    pub fn to_vec(&self) -> Vec<Complex64> {
        (0..self.len()).map(|i| self.at(i)).collect()
    }

    pub fn max_abs_diff(&self, other: &ComplexField) -> f64 {
        assert_eq!(self.shape, other.shape);
        (0..self.len())
            .map(|i| (self.at(i) - other.at(i)).norm())
            .fold(0.0, f64::max)
    }
}

/// Axis-regrouping descriptor for [`reshape_merge_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AxisSpec {
    /// Permute then merge: each inner list becomes one output axis.
    Groups(Vec<Vec<usize>>),
    /// Row-major reinterpretation to explicit extents (merging or splitting).
    Extents(Vec<usize>),
}

pub fn reshape_merge_split(f: &Field, spec: &AxisSpec) -> Result<Field> {
    match spec {
        AxisSpec::Groups(groups) => f.regroup(groups),
        AxisSpec::Extents(ext) => f.reshape(ext),
    }
}
