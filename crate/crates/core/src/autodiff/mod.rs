//! Reverse-mode automatic differentiation over 1D-signal tensors.
//!
//! A [`Graph`] is a tape of tensor operations recorded during one forward
//! pass. Operations append nodes in topological order; [`Graph::backward`]
//! walks the tape once in reverse, accumulating gradients. The op set is
//! exactly what the cascaded U-Nets need: 1D convolution, max-pooling,
//! nearest-neighbour upsampling, dense layers, pointwise activations,
//! softmax, concatenation, cropping, and the three losses.

pub mod gradcheck;
pub mod optim;
pub mod params;


use ndarray::{concatenate, s, Array2, ArrayD, Axis, Ix2, Ix3, Slice};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Floor applied inside log() in the loss ops.
pub const LOG_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        cols: Option<Array2<f64>>,
    },
    MaxPool1d {
        x: NodeId,
        src: Vec<usize>,
    },
    Upsample1d {
        x: NodeId,
        factor: usize,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Crop {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Windows {
        x: NodeId,
        starts: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    DiceLoss {
        pred: NodeId,
        truth: Array2<f64>,
        eps: f64,
    },
    BinaryCe {
        pred: NodeId,
        truth: Array2<f64>,
    },
    ClassCe {
        probs: NodeId,
        classes: Vec<usize>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by [`NodeId`]; absent for nodes that need no gradient.
pub struct Gradients(Vec<Option<ArrayD<f64>>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

/// Tape of recorded tensor operations.
pub struct Graph {
    nodes: Vec<Node>,
    /// When false, buffers needed only by backward are dropped after the
    /// forward computation (inference mode).
    retain_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            retain_backward: true,
        }
    }

    /// Forward-only graph; `backward` is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            retain_backward: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        // Ops rely on contiguous standard-layout values (e.g. concatenate
        // can yield permuted memory order).
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Non-trainable input tensor.
    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter tensor; receives a gradient in `backward`.
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn as3(&self, id: NodeId, what: &str) -> Result<ndarray::ArrayView3<'_, f64>> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| {
                Error::Shape(format!(
                    "{what}: expected 3 dims, got {:?}",
                    self.nodes[id].value.shape()
                ))
            })
    }

    fn as2(&self, id: NodeId, what: &str) -> Result<ndarray::ArrayView2<'_, f64>> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| {
                Error::Shape(format!(
                    "{what}: expected 2 dims, got {:?}",
                    self.nodes[id].value.shape()
                ))
            })
    }

    /// 1D cross-correlation with zero padding ("same"), stride 1.
    /// `x`: [B, Cin, L], `w`: [Cout, Cin, K] with K odd, `b`: [Cout].
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.as3(x, "conv1d input")?;
        let wv = self.as3(w, "conv1d weight")?;
        let bv = &self.nodes[b].value;
        let (batch, cin, len) = xv.dim();
        let (cout, wcin, k) = wv.dim();
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv1d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv1d: kernel size {k} must be odd")));
        }
        if bv.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv1d: bias shape {:?} != [{cout}]",
                bv.shape()
            )));
        }
        let pad = (k - 1) / 2;
        let cols = im2col(&xv, k, pad);
        let wmat = wv
            .to_shape((cout, cin * k))
            .expect("weight is contiguous")
            .to_owned();
        let y2 = wmat.dot(&cols);

        let mut y = ArrayD::zeros(ndarray::IxDyn(&[batch, cout, len]));
        {
            let ys = y.as_slice_mut().expect("fresh array is contiguous");
            let y2s = y2.as_slice().expect("gemm output is contiguous");
            let bs = bv.as_slice().expect("bias is contiguous");
            for bi in 0..batch {
                for co in 0..cout {
                    let dst = &mut ys[bi * cout * len + co * len..][..len];
                    let src = &y2s[co * batch * len + bi * len..][..len];
                    let bias = bs[co];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let saved = if self.retain_backward && needs {
            Some(cols)
        } else {
            None
        };
        Ok(self.push(
            y,
            Op::Conv1d {
                x,
                w,
                b,
                cols: saved,
            },
            needs,
        ))
    }

    /// Windowed maximum along the sample axis. Odd lengths are padded by
    /// replicating the final sample. Ties resolve to the lowest index.
    pub fn maxpool1d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let xv = self.as3(x, "maxpool1d input")?;
        let (batch, ch, len) = xv.dim();
        if len == 0 || batch == 0 || ch == 0 {
            return Err(Error::Shape("maxpool1d: empty input".into()));
        }
        if window < 1 {
            return Err(Error::Parameter(format!(
                "maxpool1d: window {window} must be >= 1"
            )));
        }
        let out_len = len.div_ceil(window);
        let mut y = ArrayD::zeros(ndarray::IxDyn(&[batch, ch, out_len]));
        let mut src = vec![0usize; batch * ch * out_len];
        {
            let xs = xv.to_slice().expect("input is contiguous");
            let ys = y.as_slice_mut().unwrap();
            for bc in 0..batch * ch {
                let row = &xs[bc * len..][..len];
                for j in 0..out_len {
                    let mut best = j * window;
                    let mut best_v = row[best];
                    for o in 1..window {
                        // Replicate the last sample past the end.
                        let idx = (j * window + o).min(len - 1);
                        if row[idx] > best_v {
                            best_v = row[idx];
                            best = idx;
                        }
                    }
                    ys[bc * out_len + j] = best_v;
                    src[bc * out_len + j] = best;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(y, Op::MaxPool1d { x, src }, needs))
    }

    /// Nearest-neighbour upsampling along the sample axis.
    pub fn upsample1d(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 1 {
            return Err(Error::Parameter(format!(
                "upsample1d: factor {factor} must be >= 1"
            )));
        }
        let xv = self.as3(x, "upsample1d input")?;
        let (batch, ch, len) = xv.dim();
        let mut y = ArrayD::zeros(ndarray::IxDyn(&[batch, ch, len * factor]));
        {
            let xs = xv.to_slice().expect("input is contiguous");
            let ys = y.as_slice_mut().unwrap();
            for bc in 0..batch * ch {
                for l in 0..len {
                    let v = xs[bc * len + l];
                    let dst = &mut ys[bc * len * factor + l * factor..][..factor];
                    dst.fill(v);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(y, Op::Upsample1d { x, factor }, needs))
    }

    /// Fully connected layer. `x`: [B, F], `w`: [Fout, F], `b`: [Fout].
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.as2(x, "dense input")?;
        let wv = self.as2(w, "dense weight")?;
        let bv = &self.nodes[b].value;
        let (_, fin) = xv.dim();
        let (fout, wfin) = wv.dim();
        if wfin != fin {
            return Err(Error::Shape(format!(
                "dense: input features {fin} != weight features {wfin}"
            )));
        }
        if bv.shape() != [fout] {
            return Err(Error::Shape(format!(
                "dense: bias shape {:?} != [{fout}]",
                bv.shape()
            )));
        }
        let b1 = bv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias is 1-d");
        let mut y = xv.dot(&wv.t());
        y += &b1;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y.into_dyn(), Op::Dense { x, w, b }, needs))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let y = self.nodes[x]
            .value
            .mapv(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(y, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid { x }, needs)
    }

    /// Softmax along `axis`; each lane sums to 1.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        if axis >= self.nodes[x].value.ndim() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for {} dims",
                self.nodes[x].value.ndim()
            )));
        }
        let mut y = self.nodes[x].value.clone();
        for mut lane in y.lanes_mut(Axis(axis)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let needs = self.needs(x);
        Ok(self.push(y, Op::Softmax { x, axis }, needs))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat: no inputs".into()));
        }
        let views: Vec<_> = xs.iter().map(|&id| self.nodes[id].value.view()).collect();
        let y = concatenate(Axis(axis), &views)
            .map_err(|e| Error::Shape(format!("concat along axis {axis}: {e}")))?;
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Contiguous window `[start, start+len)` along `axis`.
    pub fn crop(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[x].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "crop: axis {axis} out of range for {} dims",
                shape.len()
            )));
        }
        if start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "crop: window [{start}, {}) exceeds axis length {}",
                start + len,
                shape[axis]
            )));
        }
        let y = self.nodes[x]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs(x);
        Ok(self.push(y, Op::Crop { x, axis, start }, needs))
    }

    /// Per-batch-row window along the sample axis: row `i` of the output is
    /// `x[i, :, starts[i]..starts[i]+len]`.
    pub fn windows(&mut self, x: NodeId, starts: &[usize], len: usize) -> Result<NodeId> {
        let xv = self.as3(x, "windows input")?;
        let (batch, ch, full) = xv.dim();
        if starts.len() != batch {
            return Err(Error::Shape(format!(
                "windows: {} starts for batch of {batch}",
                starts.len()
            )));
        }
        for (i, &s) in starts.iter().enumerate() {
            if s + len > full {
                return Err(Error::Shape(format!(
                    "windows: row {i} window [{s}, {}) exceeds length {full}",
                    s + len
                )));
            }
        }
        let mut y = ArrayD::zeros(ndarray::IxDyn(&[batch, ch, len]));
        {
            let mut y3 = y.view_mut().into_dimensionality::<Ix3>().unwrap();
            for (i, &s) in starts.iter().enumerate() {
                y3.slice_mut(s![i, .., ..])
                    .assign(&xv.slice(s![i, .., s..s + len]));
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            y,
            Op::Windows {
                x,
                starts: starts.to_vec(),
            },
            needs,
        ))
    }

    /// View the tensor with a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x].value.len() {
            return Err(Error::Shape(format!(
                "reshape: {} elements into shape {:?}",
                self.nodes[x].value.len(),
                shape
            )));
        }
        let y = self.nodes[x]
            .value
            .to_shape(ndarray::IxDyn(shape))
            .expect("element count checked")
            .to_owned();
        let needs = self.needs(x);
        Ok(self.push(y, Op::Reshape { x }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let y = &self.nodes[a].value + &self.nodes[b].value;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let y = &self.nodes[a].value * &self.nodes[b].value;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul { a, b }, needs))
    }

    /// Dice loss over per-row foreground probabilities, averaged over rows.
    /// `pred`: [B, N] in [0, 1]; `truth`: binary mask of the same shape.
    pub fn dice_loss(&mut self, pred: NodeId, truth: Array2<f64>, eps: f64) -> Result<NodeId> {
        let pv = self.as2(pred, "dice_loss pred")?;
        if pv.dim() != truth.dim() {
            return Err(Error::Shape(format!(
                "dice_loss: pred {:?} vs truth {:?}",
                pv.dim(),
                truth.dim()
            )));
        }
        let batch = pv.nrows();
        let mut total = 0.0;
        for (prow, trow) in pv.outer_iter().zip(truth.outer_iter()) {
            let inter: f64 = prow.iter().zip(trow.iter()).map(|(&p, &t)| p * t).sum();
            let num = 2.0 * inter + eps;
            let den = prow.sum() + trow.sum() + eps;
            total += 1.0 - num / den;
        }
        let y = scalar(total / batch as f64);
        let needs = self.needs(pred);
        Ok(self.push(y, Op::DiceLoss { pred, truth, eps }, needs))
    }

    /// Mean binary cross-entropy between per-position foreground
    /// probabilities and a binary mask. Logs are floored at [`LOG_FLOOR`].
    pub fn binary_ce(&mut self, pred: NodeId, truth: Array2<f64>) -> Result<NodeId> {
        let pv = self.as2(pred, "binary_ce pred")?;
        if pv.dim() != truth.dim() {
            return Err(Error::Shape(format!(
                "binary_ce: pred {:?} vs truth {:?}",
                pv.dim(),
                truth.dim()
            )));
        }
        let n = pv.len() as f64;
        let mut total = 0.0;
        for (&p, &t) in pv.iter().zip(truth.iter()) {
            total -= t * p.max(LOG_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(LOG_FLOOR).ln();
        }
        let y = scalar(total / n);
        let needs = self.needs(pred);
        Ok(self.push(y, Op::BinaryCe { pred, truth }, needs))
    }

    /// Mean negative log-likelihood of the true class.
    /// `probs`: [B, X] rows summing to 1; `classes`: true index per row.
    pub fn class_ce(&mut self, probs: NodeId, classes: Vec<usize>) -> Result<NodeId> {
        let pv = self.as2(probs, "class_ce probs")?;
        let (batch, x) = pv.dim();
        if classes.len() != batch {
            return Err(Error::Shape(format!(
                "class_ce: {} labels for batch of {batch}",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= x) {
            return Err(Error::Range(format!(
                "class_ce: label {bad} outside 0..{x}"
            )));
        }
        let mut total = 0.0;
        for (row, &c) in pv.outer_iter().zip(classes.iter()) {
            total -= row[c].max(LOG_FLOOR).ln();
        }
        let y = scalar(total / batch as f64);
        let needs = self.needs(probs);
        Ok(self.push(y, Op::ClassCe { probs, classes }, needs))
    }

    /// Reverse pass from a scalar output node. Visits every node at most
    /// once, in reverse topological order.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if self.nodes[output].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: output must be scalar, got shape {:?}",
                self.nodes[output].value.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(ArrayD::from_elem(
            self.nodes[output].value.raw_dim(),
            1.0,
        ));

        for id in (0..=output).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = grads[id].take().expect("checked above");
            self.propagate(id, &grad, &mut grads)?;
            grads[id] = Some(grad);
        }
        Ok(Gradients(grads))
    }

    fn propagate(
        &self,
        id: NodeId,
        dy: &ArrayD<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, cols } => {
                let cols = cols.as_ref().ok_or_else(|| {
                    Error::Training("backward on an inference-mode graph".into())
                })?;
                let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                let (batch, cout, len) = dyv.dim();
                let wv = self.as3(*w, "conv1d weight")?;
                let (_, cin, k) = wv.dim();
                let pad = (k - 1) / 2;

                // [Cout, B*L] arrangement matching the forward gemm.
                let mut dy2 = Array2::<f64>::zeros((cout, batch * len));
                {
                    let src = dyv.to_slice().expect("grad is contiguous");
                    let dst = dy2.as_slice_mut().unwrap();
                    for bi in 0..batch {
                        for co in 0..cout {
                            dst[co * batch * len + bi * len..][..len]
                                .copy_from_slice(&src[bi * cout * len + co * len..][..len]);
                        }
                    }
                }
                if self.needs(*b) {
                    let db = dy2.sum_axis(Axis(1));
                    accumulate(grads, *b, &db.into_dyn());
                }
                if self.needs(*w) {
                    let dwmat = dy2.dot(&cols.t());
                    let dw = dwmat
                        .into_shape_with_order((cout, cin, k))
                        .expect("conformant");
                    accumulate(grads, *w, &dw.into_dyn());
                }
                if self.needs(*x) {
                    let wmat = wv.to_shape((cout, cin * k)).expect("contiguous").to_owned();
                    let dcols = wmat.t().dot(&dy2);
                    let dx = col2im(&dcols, batch, cin, len, k, pad);
                    accumulate(grads, *x, &dx.into_dyn());
                }
            }
            Op::MaxPool1d { x, src } => {
                let (batch, ch, len) = self.as3(*x, "maxpool1d input")?.dim();
                let out_len = dy.shape()[2];
                let mut dx = ArrayD::zeros(ndarray::IxDyn(&[batch, ch, len]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dys = dy.as_slice().expect("grad is contiguous");
                    for bc in 0..batch * ch {
                        for j in 0..out_len {
                            dxs[bc * len + src[bc * out_len + j]] += dys[bc * out_len + j];
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Upsample1d { x, factor } => {
                let (batch, ch, len) = self.as3(*x, "upsample1d input")?.dim();
                let mut dx = ArrayD::zeros(ndarray::IxDyn(&[batch, ch, len]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dys = dy.as_slice().expect("grad is contiguous");
                    for bc in 0..batch * ch {
                        for l in 0..len {
                            let seg = &dys[bc * len * factor + l * factor..][..*factor];
                            dxs[bc * len + l] += seg.iter().sum::<f64>();
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Dense { x, w, b } => {
                let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*b) {
                    accumulate(grads, *b, &dyv.sum_axis(Axis(0)).into_dyn());
                }
                if self.needs(*w) {
                    let xv = self.as2(*x, "dense input")?;
                    accumulate(grads, *w, &dyv.t().dot(&xv).into_dyn());
                }
                if self.needs(*x) {
                    let wv = self.as2(*w, "dense weight")?;
                    accumulate(grads, *x, &dyv.dot(&wv).into_dyn());
                }
            }
            Op::LeakyRelu { x, slope } => {
                let slope = *slope;
                let mut dx = dy.clone();
                dx.zip_mut_with(&self.nodes[*x].value, |g, &v| {
                    if v < 0.0 {
                        *g *= slope;
                    }
                });
                accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = dy.clone();
                dx.zip_mut_with(&self.nodes[id].value, |g, &y| *g *= y * (1.0 - y));
                accumulate(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let mut dx = dy.clone();
                {
                    let dx_lanes = dx.lanes_mut(Axis(*axis));
                    let y_lanes = y.lanes(Axis(*axis));
                    for (mut dlane, ylane) in dx_lanes.into_iter().zip(y_lanes) {
                        let dot: f64 = dlane.iter().zip(ylane.iter()).map(|(&d, &p)| d * p).sum();
                        for (d, &p) in dlane.iter_mut().zip(ylane.iter()) {
                            *d = p * (*d - dot);
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0;
                for &xid in xs {
                    let width = self.nodes[xid].value.shape()[*axis];
                    if self.needs(xid) {
                        let part = dy
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + width))
                            .to_owned();
                        accumulate(grads, xid, &part);
                    }
                    offset += width;
                }
            }
            Op::Crop { x, axis, start } => {
                let mut dx = ArrayD::zeros(self.nodes[*x].value.raw_dim());
                let len = dy.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(dy);
                accumulate(grads, *x, &dx);
            }
            Op::Windows { x, starts } => {
                let mut dx = ArrayD::zeros(self.nodes[*x].value.raw_dim());
                let len = dy.shape()[2];
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let dy3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    for (i, &st) in starts.iter().enumerate() {
                        let mut tgt = dx3.slice_mut(s![i, .., st..st + len]);
                        tgt += &dy3.slice(s![i, .., ..]);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                let dx = dy
                    .to_shape(self.nodes[*x].value.raw_dim())
                    .expect("same element count")
                    .to_owned();
                accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = dy * &self.nodes[*b].value;
                    accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = dy * &self.nodes[*a].value;
                    accumulate(grads, *b, &db);
                }
            }
            Op::DiceLoss { pred, truth, eps } => {
                let g = dy.iter().next().copied().unwrap();
                let pv = self.as2(*pred, "dice_loss pred")?;
                let batch = pv.nrows() as f64;
                let mut dp = Array2::<f64>::zeros(pv.dim());
                for ((prow, trow), mut drow) in pv
                    .outer_iter()
                    .zip(truth.outer_iter())
                    .zip(dp.outer_iter_mut())
                {
                    let inter: f64 = prow.iter().zip(trow.iter()).map(|(&p, &t)| p * t).sum();
                    let num = 2.0 * inter + eps;
                    let den = prow.sum() + trow.sum() + eps;
                    for (d, &t) in drow.iter_mut().zip(trow.iter()) {
                        *d = g * (-(2.0 * t * den - num) / (den * den)) / batch;
                    }
                }
                accumulate(grads, *pred, &dp.into_dyn());
            }
            Op::BinaryCe { pred, truth } => {
                let g = dy.iter().next().copied().unwrap();
                let pv = self.as2(*pred, "binary_ce pred")?;
                let n = pv.len() as f64;
                let mut dp = Array2::<f64>::zeros(pv.dim());
                for ((&p, &t), d) in pv.iter().zip(truth.iter()).zip(dp.iter_mut()) {
                    let mut v = 0.0;
                    if p > LOG_FLOOR {
                        v -= t / p;
                    }
                    if 1.0 - p > LOG_FLOOR {
                        v += (1.0 - t) / (1.0 - p);
                    }
                    *d = g * v / n;
                }
                accumulate(grads, *pred, &dp.into_dyn());
            }
            Op::ClassCe { probs, classes } => {
                let g = dy.iter().next().copied().unwrap();
                let pv = self.as2(*probs, "class_ce probs")?;
                let batch = pv.nrows() as f64;
                let mut dp = Array2::<f64>::zeros(pv.dim());
                for (i, &c) in classes.iter().enumerate() {
                    let p = pv[[i, c]];
                    if p > LOG_FLOOR {
                        dp[[i, c]] = -g / (p * batch);
                    }
                }
                accumulate(grads, *probs, &dp.into_dyn());
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(ndarray::IxDyn(&[]), v)
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: &ArrayD<f64>) {
    match &mut grads[id] {
        Some(g) => *g += delta,
        slot => *slot = Some(delta.clone()),
    }
}

/// Unfold [B, Cin, L] into [Cin*K, B*L] patch columns with zero padding.
fn im2col(x: &ndarray::ArrayView3<'_, f64>, k: usize, pad: usize) -> Array2<f64> {
    let (batch, cin, len) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * k, batch * len));
    let xs = x.to_slice().expect("input is contiguous");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for kk in 0..k {
            let row = ci * k + kk;
            let lo = pad.saturating_sub(kk);
            let hi = len - kk.saturating_sub(pad);
            for bi in 0..batch {
                let dst = &mut cs[row * batch * len + bi * len + lo..][..hi - lo];
                let src_off = bi * cin * len + ci * len + (lo + kk - pad);
                dst.copy_from_slice(&xs[src_off..][..hi - lo]);
            }
        }
    }
    cols
}

/// Fold [Cin*K, B*L] patch-column gradients back onto [B, Cin, L].
fn col2im(dcols: &Array2<f64>, batch: usize, cin: usize, len: usize, k: usize, pad: usize) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((batch, cin, len));
    let ds = dcols.as_slice().expect("gemm output is contiguous");
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..cin {
        for kk in 0..k {
            let row = ci * k + kk;
            let lo = pad.saturating_sub(kk);
            let hi = len - kk.saturating_sub(pad);
            for bi in 0..batch {
                let src = &ds[row * batch * len + bi * len + lo..][..hi - lo];
                let dst_off = bi * cin * len + ci * len + (lo + kk - pad);
                for (j, &v) in src.iter().enumerate() {
                    xs[dst_off + j] += v;
                }
            }
        }
    }
    dx
}
