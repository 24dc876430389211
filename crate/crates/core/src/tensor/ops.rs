use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Multiset aggregation used by reductions and message passing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Sum,
    Mean,
    Max,
}

/// Entrywise operations addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Neg,
}

/// Compressed row lists: output row `g` gathers source rows `group(g)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Segments {
    pub fn from_lists<I, L>(lists: I) -> Self
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[usize]>,
    {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        for l in lists {
            indices.extend_from_slice(l.as_ref());
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.indices[self.offsets[g]..self.offsets[g + 1]]
    }

    pub fn num_entries(&self) -> usize {
        self.indices.len()
    }

    fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Like [`Segments`] but each incidence also names a weight entry:
/// output row `g` aggregates `w[weight] * x[source]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WeightedSegments {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<usize>,
}

impl WeightedSegments {
    pub fn from_lists<I, L>(lists: I) -> Self
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[(usize, usize)]>,
    {
        let mut out = Self {
            offsets: vec![0],
            ..Self::default()
        };
        for l in lists {
            for &(s, w) in l.as_ref() {
                out.sources.push(s);
                out.weights.push(w);
            }
            out.offsets.push(out.sources.len());
        }
        out
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ (only equal shapes broadcast)",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn require_matrix(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Applies a named entrywise op to one or two arguments.
    pub fn elementwise<'a>(&'a self, op: ElementOp, args: &[Var<'a>]) -> Result<Var<'a>> {
        let arity = match op {
            ElementOp::Add | ElementOp::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Invalid(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            ElementOp::Add => args[0].add(args[1]),
            ElementOp::Mul => args[0].mul(args[1]),
            ElementOp::Relu => Ok(args[0].relu()),
            ElementOp::Sigmoid => Ok(args[0].sigmoid()),
            ElementOp::Log => args[0].log(),
            ElementOp::Exp => Ok(args[0].exp()),
            ElementOp::Neg => Ok(args[0].neg()),
        }
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols<'a>(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = vals[0].rows();
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = require_matrix(v, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts {} and {} differ",
                    rows, r
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for i in 0..rows {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(&widths) {
                out[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
                off += w;
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(
            value,
            parts,
            Box::new(move |g, _, _, needs| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for (p, &w) in widths.iter().enumerate() {
                    if needs[p] {
                        let mut d = vec![0.0; rows * w];
                        for i in 0..rows {
                            d[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        grads.push(Some(Tensor::new(vec![rows, w], d)?));
                    } else {
                        grads.push(None);
                    }
                    off += w;
                }
                Ok(grads)
            }),
        ))
    }

    /// Weighted segment aggregation: row `g` of the result aggregates
    /// `w[weight] * x[source]` over the incidences of group `g`.
    ///
    /// `Sum` is the plain weighted sum; `Mean` divides it by the group's total
    /// weight; `Max` takes, per coordinate, the largest `x[source]` among
    /// incidences with non-zero weight (lowest index on ties) scaled by its
    /// weight. Groups with zero total weight (or no incidences) yield zero.
    pub fn weighted_aggregate<'a>(
        &'a self,
        x: Var<'a>,
        weights: Var<'a>,
        seg: Rc<WeightedSegments>,
        agg: Aggregator,
    ) -> Result<Var<'a>> {
        let xv = x.value();
        let wv = weights.value();
        let (s_rows, d) = require_matrix(&xv, "weighted_aggregate")?;
        if seg.sources.iter().any(|&s| s >= s_rows) || seg.weights.iter().any(|&w| w >= wv.len()) {
            return Err(Error::Index("weighted_aggregate incidence out of range".into()));
        }
        let groups = seg.num_groups();
        let mut out = vec![0.0; groups * d];
        let mut totals = vec![0.0; groups];
        // per output coordinate: winning incidence for max
        let mut argmax = if agg == Aggregator::Max {
            vec![usize::MAX; groups * d]
        } else {
            Vec::new()
        };
        let w = wv.data();
        let xd = xv.data();
        for gi in 0..groups {
            let orow = &mut out[gi * d..(gi + 1) * d];
            for e in seg.range(gi) {
                let we = w[seg.weights[e]];
                let xs = &xd[seg.sources[e] * d..(seg.sources[e] + 1) * d];
                totals[gi] += we;
                match agg {
                    Aggregator::Sum | Aggregator::Mean => {
                        if we != 0.0 {
                            for (o, &xv) in orow.iter_mut().zip(xs) {
                                *o += we * xv;
                            }
                        }
                    }
                    Aggregator::Max => {
                        if we == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let slot = &mut argmax[gi * d + j];
                            if *slot == usize::MAX || xs[j] > xd[seg.sources[*slot] * d + j] {
                                *slot = e;
                            }
                        }
                    }
                }
            }
            match agg {
                Aggregator::Mean => {
                    if totals[gi] != 0.0 {
                        for o in orow.iter_mut() {
                            *o /= totals[gi];
                        }
                    } else {
                        orow.fill(0.0);
                    }
                }
                Aggregator::Max => {
                    for j in 0..d {
                        let e = argmax[gi * d + j];
                        if e != usize::MAX {
                            orow[j] = w[seg.weights[e]] * xd[seg.sources[e] * d + j];
                        }
                    }
                }
                Aggregator::Sum => {}
            }
        }
        let value = Tensor::new(vec![groups, d], out)?;
        let w_shape = wv.shape().to_vec();
        Ok(self.push(
            value,
            &[x, weights],
            Box::new(move |g, pv, out, needs| {
                let (xd, w) = (pv[0].data(), pv[1].data());
                let gd = g.data();
                let mut gx = vec![0.0; s_rows * d];
                let mut gw = vec![0.0; w.len()];
                for gi in 0..groups {
                    let grow = &gd[gi * d..(gi + 1) * d];
                    match agg {
                        Aggregator::Sum => {
                            for e in seg.range(gi) {
                                let (s, wi) = (seg.sources[e], seg.weights[e]);
                                let xs = &xd[s * d..(s + 1) * d];
                                if needs[0] && w[wi] != 0.0 {
                                    for (a, &b) in gx[s * d..(s + 1) * d].iter_mut().zip(grow) {
                                        *a += w[wi] * b;
                                    }
                                }
                                if needs[1] {
                                    gw[wi] += xs.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                        Aggregator::Mean => {
                            let total = totals[gi];
                            if total == 0.0 {
                                continue;
                            }
                            let orow = &out.data()[gi * d..(gi + 1) * d];
                            for e in seg.range(gi) {
                                let (s, wi) = (seg.sources[e], seg.weights[e]);
                                let xs = &xd[s * d..(s + 1) * d];
                                if needs[0] && w[wi] != 0.0 {
                                    let f = w[wi] / total;
                                    for (a, &b) in gx[s * d..(s + 1) * d].iter_mut().zip(grow) {
                                        *a += f * b;
                                    }
                                }
                                if needs[1] {
                                    gw[wi] += xs
                                        .iter()
                                        .zip(orow)
                                        .zip(grow)
                                        .map(|((a, o), b)| (a - o) * b)
                                        .sum::<f64>()
                                        / total;
                                }
                            }
                        }
                        Aggregator::Max => {
                            for j in 0..d {
                                let e = argmax[gi * d + j];
                                if e == usize::MAX {
                                    continue;
                                }
                                let (s, wi) = (seg.sources[e], seg.weights[e]);
                                gx[s * d + j] += w[wi] * grow[j];
                                gw[wi] += xd[s * d + j] * grow[j];
                            }
                        }
                    }
                }
                Ok(vec![
                    needs[0].then(|| Tensor::new(vec![s_rows, d], gx)).transpose()?,
                    needs[1].then(|| Tensor::new(w_shape.clone(), gw)).transpose()?,
                ])
            }),
        ))
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(
            value,
            &[self],
            Box::new(move |g, pv, out, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(pv[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
            }),
        )
    }

    /// Matrix product `[p×q] · [q×r]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (p, q) = require_matrix(&a, "matmul")?;
        let (q2, r) = require_matrix(&b, "matmul")?;
        if q != q2 {
            return Err(Error::Shape(format!(
                "matmul: [{p}x{q}] x [{q2}x{r}] inner dimensions differ"
            )));
        }
        let mut out = vec![0.0; p * r];
        matmul_into(a.data(), b.data(), &mut out, p, q, r);
        let value = Tensor::new(vec![p, r], out)?;
        Ok(self.tape.push(
            value,
            &[self, other],
            Box::new(move |g, pv, _, needs| {
                let ga = if needs[0] {
                    let mut d = vec![0.0; p * q];
                    matmul_nt_into(g.data(), pv[1].data(), &mut d, p, r, q);
                    Some(Tensor::new(vec![p, q], d)?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let mut d = vec![0.0; q * r];
                    matmul_tn_into(pv[0].data(), g.data(), &mut d, p, q, r);
                    Some(Tensor::new(vec![q, r], d)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        require_matrix(&v, "transpose")?;
        Ok(self.tape.push(
            v.transpose(),
            &[self],
            Box::new(|g, _, _, _| Ok(vec![Some(g.transpose())])),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        let orig = self.shape();
        Ok(self.tape.push(
            v,
            &[self],
            Box::new(move |g, _, _, _| Ok(vec![Some(g.clone().reshape(&orig)?)])),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        Ok(self.tape.push(
            zip_map(&a, &b, |x, y| x + y),
            &[self, other],
            Box::new(|g, _, _, needs| {
                Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
            }),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        Ok(self.tape.push(
            zip_map(&a, &b, |x, y| x - y),
            &[self, other],
            Box::new(|g, _, _, needs| {
                Ok(vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.map(|x| -x)),
                ])
            }),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        Ok(self.tape.push(
            zip_map(&a, &b, |x, y| x * y),
            &[self, other],
            Box::new(|g, pv, _, needs| {
                Ok(vec![
                    needs[0].then(|| zip_map(g, pv[1], |g, y| g * y)),
                    needs[1].then(|| zip_map(g, pv[0], |g, x| g * x)),
                ])
            }),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div")?;
        if b.data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        Ok(self.tape.push(
            zip_map(&a, &b, |x, y| x / y),
            &[self, other],
            Box::new(|g, pv, out, needs| {
                Ok(vec![
                    needs[0].then(|| zip_map(g, pv[1], |g, y| g / y)),
                    needs[1].then(|| {
                        let t = zip_map(g, out, |g, o| g * o);
                        zip_map(&t, pv[1], |t, y| -t / y)
                    }),
                ])
            }),
        ))
    }

    /// Multiply every entry by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    /// Adds a length-`c` vector to every row of an `[r×c]` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let (r, c) = require_matrix(&x, "add_bias")?;
        if b.len() != c {
            return Err(Error::Shape(format!(
                "add_bias: bias of {} entries for {} columns",
                b.len(),
                c
            )));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let b_shape = b.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(vec![r, c], out)?,
            &[self, bias],
            Box::new(move |g, _, _, needs| {
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(b_shape.clone(), d)
                });
                Ok(vec![needs[0].then(|| g.clone()), gb.transpose()?])
            }),
        ))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive entry {bad}")));
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Entrywise `ln(e^a + e^b)`.
    pub fn logaddexp(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "logaddexp")?;
        Ok(self.tape.push(
            zip_map(&a, &b, log_add_exp),
            &[self, other],
            Box::new(|g, pv, out, needs| {
                let part = |x: &Tensor| {
                    let w = zip_map(x, out, |x, o| if o == f64::NEG_INFINITY { 0.0 } else { (x - o).exp() });
                    zip_map(g, &w, |g, w| g * w)
                };
                Ok(vec![needs[0].then(|| part(pv[0])), needs[1].then(|| part(pv[1]))])
            }),
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape.push(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(move |g, _, _, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Reduction along `axis` of a rank-1 or rank-2 tensor; the axis is
    /// dropped from the result. `Max` sends the gradient to the first
    /// maximal entry.
    pub fn reduce(self, op: Aggregator, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols, out_shape) = match (v.rank(), axis) {
            (1, 0) => (1, v.len(), vec![]),
            (2, 0) => (v.shape()[0], v.shape()[1], vec![v.shape()[1]]),
            (2, 1) => (v.shape()[0], v.shape()[1], vec![v.shape()[0]]),
            _ => {
                return Err(Error::Shape(format!(
                    "reduce: axis {axis} out of range for shape {:?}",
                    v.shape()
                )))
            }
        };
        // Normalise to reducing over `len` items for each of `outer` outputs.
        let (outer, len) = if v.rank() == 2 && axis == 0 { (cols, rows) } else if v.rank() == 1 { (1, cols) } else { (rows, cols) };
        let stride_axis0 = v.rank() == 2 && axis == 0;
        let at = move |o: usize, i: usize| if stride_axis0 { i * cols + o } else { o * len + i };
        if op == Aggregator::Max && len == 0 {
            return Err(Error::Shape("max over an empty axis".into()));
        }
        let d = v.data();
        let mut out = vec![0.0; outer];
        let mut arg = vec![0usize; if op == Aggregator::Max { outer } else { 0 }];
        for o in 0..outer {
            match op {
                Aggregator::Sum => out[o] = (0..len).map(|i| d[at(o, i)]).sum(),
                Aggregator::Mean => {
                    out[o] = if len == 0 { 0.0 } else { (0..len).map(|i| d[at(o, i)]).sum::<f64>() / len as f64 }
                }
                Aggregator::Max => {
                    let mut best = 0;
                    for i in 1..len {
                        if d[at(o, i)] > d[at(o, best)] {
                            best = i;
                        }
                    }
                    arg[o] = best;
                    out[o] = d[at(o, best)];
                }
            }
        }
        let in_shape = v.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(out_shape, out)?,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut gi = vec![0.0; rows * cols];
                for o in 0..outer {
                    let go = g.data()[o];
                    match op {
                        Aggregator::Sum => (0..len).for_each(|i| gi[at(o, i)] += go),
                        Aggregator::Mean => {
                            (0..len).for_each(|i| gi[at(o, i)] += go / len as f64)
                        }
                        Aggregator::Max => gi[at(o, arg[o])] += go,
                    }
                }
                Ok(vec![Some(Tensor::new(in_shape.clone(), gi)?)])
            }),
        ))
    }

    /// Row-wise log-sum-exp of an `[r×c]` matrix, giving `[r×1]`.
    pub fn logsumexp_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = require_matrix(&v, "logsumexp_rows")?;
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let row = v.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                }
            })
            .collect();
        Ok(self.tape.push(
            Tensor::new(vec![r, 1], out)?,
            &[self],
            Box::new(move |g, pv, out, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let o = out.data()[i];
                    if o == f64::NEG_INFINITY {
                        continue;
                    }
                    for j in 0..c {
                        d[i * c + j] = g.data()[i] * (pv[0].data()[i * c + j] - o).exp();
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], d)?)])
            }),
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = require_matrix(&v, "log_softmax_rows")?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.tape.push(
            Tensor::new(vec![r, c], out)?,
            &[self],
            Box::new(move |g, _, out, _| {
                let mut d = g.data().to_vec();
                for i in 0..r {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..c {
                        d[i * c + j] -= out.data()[i * c + j].exp() * gs;
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], d)?)])
            }),
        ))
    }

    /// Per-row standardisation to zero mean and unit variance.
    pub fn layer_norm_rows(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = require_matrix(&v, "layer_norm_rows")?;
        let mut out = v.data().to_vec();
        let mut inv_std = vec![0.0; r];
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            inv_std[i] = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv_std[i]);
        }
        Ok(self.tape.push(
            Tensor::new(vec![r, c], out)?,
            &[self],
            Box::new(move |g, _, y, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] = inv_std[i] * (gr[j] - gm - yr[j] * gym);
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], d)?)])
            }),
        ))
    }

    /// Column gather: output column `j` copies input column `idx[j]`, or is
    /// filled with the constant `fill` when `idx[j]` is `None`.
    pub fn gather_cols(self, idx: &[Option<usize>], fill: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = require_matrix(&v, "gather_cols")?;
        if let Some(bad) = idx.iter().flatten().find(|&&j| j >= c) {
            return Err(Error::Index(format!("gather_cols: column {bad} of {c}")));
        }
        let w = idx.len();
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            for (j, src) in idx.iter().enumerate() {
                out[i * w + j] = match src {
                    Some(s) => v.data()[i * c + s],
                    None => fill,
                };
            }
        }
        let idx = idx.to_vec();
        Ok(self.tape.push(
            Tensor::new(vec![r, w], out)?,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for (j, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            d[i * c + s] += g.data()[i * w + j];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], d)?)])
            }),
        ))
    }

    /// Row gather (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = require_matrix(&v, "gather_rows")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("gather_rows: row {bad} of {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(v.row(i));
        }
        let idx = idx.to_vec();
        Ok(self.tape.push(
            Tensor::new(vec![idx.len(), c], out)?,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; r * c];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[o * c + j];
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], d)?)])
            }),
        ))
    }

    /// Segment aggregation over a fixed structure: row `g` of the result
    /// aggregates rows `seg.group(g)` of `self`. Empty groups give zero.
    pub fn aggregate_rows(self, seg: Rc<Segments>, agg: Aggregator) -> Result<Var<'t>> {
        let v = self.value();
        let (s_rows, d) = require_matrix(&v, "aggregate_rows")?;
        if seg.max_index().is_some_and(|m| m >= s_rows) {
            return Err(Error::Index("aggregate_rows: source row out of range".into()));
        }
        let groups = seg.num_groups();
        let xd = v.data();
        let mut out = vec![0.0; groups * d];
        let mut arg = if agg == Aggregator::Max { vec![usize::MAX; groups * d] } else { Vec::new() };
        for gi in 0..groups {
            let members = seg.group(gi);
            let orow = &mut out[gi * d..(gi + 1) * d];
            match agg {
                Aggregator::Sum | Aggregator::Mean => {
                    for &s in members {
                        for (o, &x) in orow.iter_mut().zip(&xd[s * d..(s + 1) * d]) {
                            *o += x;
                        }
                    }
                    if agg == Aggregator::Mean && !members.is_empty() {
                        let inv = 1.0 / members.len() as f64;
                        orow.iter_mut().for_each(|o| *o *= inv);
                    }
                }
                Aggregator::Max => {
                    for j in 0..d {
                        let mut best = usize::MAX;
                        for &s in members {
                            if best == usize::MAX || xd[s * d + j] > xd[best * d + j] {
                                best = s;
                            }
                        }
                        if best != usize::MAX {
                            orow[j] = xd[best * d + j];
                            arg[gi * d + j] = best;
                        }
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![groups, d], out)?,
            &[self],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; s_rows * d];
                for gi in 0..groups {
                    let members = seg.group(gi);
                    let grow = &gd[gi * d..(gi + 1) * d];
                    match agg {
                        Aggregator::Sum | Aggregator::Mean => {
                            let f = if agg == Aggregator::Mean && !members.is_empty() {
                                1.0 / members.len() as f64
                            } else {
                                1.0
                            };
                            for &s in members {
                                for (a, &b) in dx[s * d..(s + 1) * d].iter_mut().zip(grow) {
                                    *a += f * b;
                                }
                            }
                        }
                        Aggregator::Max => {
                            for j in 0..d {
                                let s = arg[gi * d + j];
                                if s != usize::MAX {
                                    dx[s * d + j] += grow[j];
                                }
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(vec![s_rows, d], dx)?)])
            }),
        ))
    }
}
