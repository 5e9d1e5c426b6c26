use std::fmt;
use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise non-linearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(arg_err!("unknown activation kind {other:?}")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

/// Stride, dilation, zero padding and channel grouping of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Padding that keeps spatial extents at stride 1 for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Mul(Var, Var),
    MulMap {
        x: Var,
        map: Var,
    },
    Resize(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GlobalAvgPool(Var),
    BroadcastSpatial(Var),
    Softmax(Var),
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    Linearized {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Tape of a forward computation. Nodes are appended in evaluation order, so
/// the node index is a topological order and the graph is acyclic by
/// construction.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates spent so far by convolutions and resizes (four
    /// taps per resized output element).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives no parameter update.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf(None))
    }

    /// A leaf bound to a stored parameter; its gradient is routed back to the
    /// store by [`Graph::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let [n, c_in, h, wd] = self.value(x).dims4()?;
        let [c_out, cin_g, kh, kw] = self.value(w).dims4()?;
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(arg_err!("stride, dilation and groups must be positive: {spec:?}"));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cin_g * spec.groups != c_in {
            return Err(shape_err!(
                "conv input has {c_in} channels but kernel {:?} with {} groups expects {}",
                self.shape(w),
                spec.groups,
                cin_g * spec.groups
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(arg_err!("kernel extents must be odd, got {kh}x{kw}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err!("bias {:?} for {c_out} output channels", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            groups: spec.groups,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        if ho == 0 || wo == 0 {
            return Err(shape_err!("convolution output of {h}x{wd} input is empty: {spec:?}"));
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![n, c_out, ho, wo], data)?;
        self.macs += geom.macs();
        Ok(self.push(out, Op::Conv { x, w, b, geom }))
    }

    /// Depthwise convolution (one `[1, kh, kw]` filter per input channel,
    /// using `spec` for stride, dilation and padding) followed by a 1x1
    /// pointwise convolution carrying the optional bias.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let [_, c_in, _, _] = self.value(x).dims4()?;
        let [dw_c, dw_one, _, _] = self.value(depthwise).dims4()?;
        let [_, pw_in, pkh, pkw] = self.value(pointwise).dims4()?;
        if dw_c != c_in || dw_one != 1 {
            return Err(shape_err!(
                "depthwise kernel {:?} does not match {c_in} input channels",
                self.shape(depthwise)
            ));
        }
        if pw_in != c_in || pkh != 1 || pkw != 1 {
            return Err(shape_err!(
                "pointwise kernel {:?} does not match {c_in} depthwise channels",
                self.shape(pointwise)
            ));
        }
        let mid = self.conv2d(x, depthwise, None, spec.with_groups(c_in))?;
        self.conv2d(mid, pointwise, bias, Conv2dSpec::default())
    }

    /// Per-channel `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err!("affine parameters must have shape [{c}]"));
        }
        let (xs, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let plane = h * w;
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ch in 0..c {
                let (s, t) = (sc[ch].as_f64(), sh[ch].as_f64());
                let src = &xs[(b * c + ch) * plane..][..plane];
                out.extend(src.iter().map(|v| T::from_f64(s * v.as_f64() + t)));
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::Affine { x, scale, shift }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        let data = match kind {
            Activation::Relu => src
                .data()
                .iter()
                .map(|&v| if v.as_f64() > 0.0 { v } else { T::ZERO })
                .collect(),
            Activation::Sigmoid => src
                .data()
                .iter()
                .map(|v| T::from_f64(kernels::sigmoid(v.as_f64())))
                .collect(),
        };
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| T::from_f64(x.as_f64() + y.as_f64()))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| T::from_f64(x.as_f64() * y.as_f64()))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies `x: [N, C, H, W]` by a single-channel map `[N, 1, H, W]`
    /// broadcast over channels.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(map) != [n, 1, h, w] {
            return Err(shape_err!(
                "map {:?} cannot gate features {:?}",
                self.shape(map),
                self.shape(x)
            ));
        }
        let (xs, ms) = (self.value(x).data(), self.value(map).data());
        let plane = h * w;
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            let m = &ms[b * plane..][..plane];
            for ch in 0..c {
                let src = &xs[(b * c + ch) * plane..][..plane];
                out.extend(src.iter().zip(m).map(|(v, g)| T::from_f64(v.as_f64() * g.as_f64())));
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::MulMap { x, map }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(arg_err!("upsampling factor must be at least 2, got {factor}"));
        }
        let [_, _, h, w] = self.value(x).dims4()?;
        self.resize(x, h * factor, w * factor)
    }

    /// Bilinear resize of the two trailing axes.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(shape_err!("cannot resize {h}x{w} to {oh}x{ow}"));
        }
        let data = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, oh, ow);
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        self.macs += 4 * (n * c * oh * ow) as u64;
        Ok(self.push(out, Op::Resize(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| arg_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(arg_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat along {axis}: {:?} vs {:?}", s, base));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block: usize = t.shape()[axis..].iter().product();
                data.extend_from_slice(&t.data()[o * block..][..block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Mean over the spatial axes, keeping them as extents of one.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let out = Tensor::new(vec![n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Replicates `[N, C, 1, 1]` over an `h x w` plane.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, one_h, one_w] = self.value(x).dims4()?;
        if one_h != 1 || one_w != 1 {
            return Err(shape_err!("broadcast source must be 1x1, got {:?}", self.shape(x)));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.push(out, Op::BroadcastSpatial(x)))
    }

    /// Softmax across axis 1 of a tensor of rank at least two.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] < 2 {
            return Err(shape_err!("softmax needs at least two classes on axis 1, got {shape:?}"));
        }
        let plane: usize = shape[2..].iter().product();
        let data = kernels::softmax_forward(self.value(x).data(), shape[0], shape[1], plane);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| T::from_f64(c * v.as_f64())).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    /// Scalar node with an externally computed value and gradient with respect
    /// to `x`. Used for fused objectives whose derivative is known in closed
    /// form.
    pub fn linearized(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err!(
                "linearised gradient has {} entries for a tensor of {}",
                grad.len(),
                self.value(x).len()
            ));
        }
        Ok(self.push(Tensor::scalar(T::from_f64(value)), Op::Linearized { x, grad }))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of the parameter leaves reached from `loss`, in node order.
    pub fn param_gradients(&self, loss: Var) -> Result<Vec<(ParamId, Vec<f64>)>> {
        let mut grads = self.backward(loss)?.grads;
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(grads.len()) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, grads[i].take()) {
                out.push((*id, g));
            }
        }
        Ok(out)
    }

    /// Runs [`Graph::backward`] and adds every parameter leaf's gradient into
    /// the store. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_gradients(loss)? {
            store.accumulate_grad(id, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn slot<'a, T: Real>(
            nodes: &[Node<T>],
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf(_) => {}
            Op::Conv { x, w, b, geom } => {
                let wv = nodes[w.0].value.data();
                kernels::conv2d_backward_input(geom, gy, wv, slot(nodes, grads, *x));
                let xv = nodes[x.0].value.data();
                kernels::conv2d_backward_params(geom, gy, xv, Some(slot(nodes, grads, *w)), None);
                if let Some(b) = b {
                    kernels::conv2d_backward_params(geom, gy, xv, None, Some(slot(nodes, grads, *b)));
                }
            }
            Op::Affine { x, scale, shift } => {
                let [n, c, h, w] = y.dims4().expect("rank 4");
                let plane = h * w;
                let xs = nodes[x.0].value.data();
                let sc = nodes[scale.0].value.data();
                {
                    let gx = slot(nodes, grads, *x);
                    for b in 0..n {
                        for ch in 0..c {
                            let s = sc[ch].as_f64();
                            let off = (b * c + ch) * plane;
                            for j in off..off + plane {
                                gx[j] += s * gy[j];
                            }
                        }
                    }
                }
                {
                    let gs = slot(nodes, grads, *scale);
                    for b in 0..n {
                        for (ch, g) in gs.iter_mut().enumerate() {
                            let off = (b * c + ch) * plane;
                            *g += (off..off + plane).map(|j| gy[j] * xs[j].as_f64()).sum::<f64>();
                        }
                    }
                }
                let gt = slot(nodes, grads, *shift);
                for b in 0..n {
                    for (ch, g) in gt.iter_mut().enumerate() {
                        let off = (b * c + ch) * plane;
                        *g += gy[off..off + plane].iter().sum::<f64>();
                    }
                }
            }
            Op::Act(x, kind) => {
                let gx = slot(nodes, grads, *x);
                match kind {
                    Activation::Relu => {
                        for ((g, &o), &u) in gx.iter_mut().zip(y.data()).zip(gy) {
                            if o.as_f64() > 0.0 {
                                *g += u;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((g, &o), &u) in gx.iter_mut().zip(y.data()).zip(gy) {
                            let s = o.as_f64();
                            *g += u * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let g = slot(nodes, grads, *v);
                    for (d, &u) in g.iter_mut().zip(gy) {
                        *d += u;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    let o = nodes[other.0].value.data();
                    let g = slot(nodes, grads, *v);
                    for ((d, &u), &ov) in g.iter_mut().zip(gy).zip(o) {
                        *d += u * ov.as_f64();
                    }
                }
            }
            Op::MulMap { x, map } => {
                let [n, c, h, w] = y.dims4().expect("rank 4");
                let plane = h * w;
                let ms = nodes[map.0].value.data();
                let xs = nodes[x.0].value.data();
                {
                    let gx = slot(nodes, grads, *x);
                    for b in 0..n {
                        let m = &ms[b * plane..][..plane];
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for (j, mv) in m.iter().enumerate() {
                                gx[off + j] += gy[off + j] * mv.as_f64();
                            }
                        }
                    }
                }
                let gm = slot(nodes, grads, *map);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in 0..plane {
                            gm[b * plane + j] += gy[off + j] * xs[off + j].as_f64();
                        }
                    }
                }
            }
            Op::Resize(x) => {
                let [n, c, h, w] = nodes[x.0].value.dims4().expect("rank 4");
                let [_, _, oh, ow] = y.dims4().expect("rank 4");
                kernels::bilinear_backward(gy, n * c, h, w, oh, ow, slot(nodes, grads, *x));
            }
            Op::Concat { xs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let total: usize = y.shape()[*axis..].iter().product();
                let mut offset = 0;
                for v in xs {
                    let block: usize = nodes[v.0].value.shape()[*axis..].iter().product();
                    let g = slot(nodes, grads, *v);
                    for o in 0..outer {
                        let src = &gy[o * total + offset..][..block];
                        for (d, &u) in g[o * block..][..block].iter_mut().zip(src) {
                            *d += u;
                        }
                    }
                    offset += block;
                }
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = nodes[x.0].value.dims4().expect("rank 4");
                let plane = h * w;
                let g = slot(nodes, grads, *x);
                for (k, &u) in gy.iter().enumerate() {
                    let share = u / plane as f64;
                    g[k * plane..][..plane].iter_mut().for_each(|d| *d += share);
                }
            }
            Op::BroadcastSpatial(x) => {
                let [_, _, h, w] = y.dims4().expect("rank 4");
                let plane = h * w;
                let g = slot(nodes, grads, *x);
                for (k, d) in g.iter_mut().enumerate() {
                    *d += gy[k * plane..][..plane].iter().sum::<f64>();
                }
            }
            Op::Softmax(x) => {
                let s = y.shape();
                let plane: usize = s[2..].iter().product();
                kernels::softmax_backward(y.data(), gy, s[0], s[1], plane, slot(nodes, grads, *x));
            }
            Op::Reshape(x) => {
                let g = slot(nodes, grads, *x);
                for (d, &u) in g.iter_mut().zip(gy) {
                    *d += u;
                }
            }
            Op::Sum(x) => {
                let g = slot(nodes, grads, *x);
                g.iter_mut().for_each(|d| *d += gy[0]);
            }
            Op::Scale(x, c) => {
                let g = slot(nodes, grads, *x);
                for (d, &u) in g.iter_mut().zip(gy) {
                    *d += c * u;
                }
            }
            Op::Linearized { x, grad } => {
                let g = slot(nodes, grads, *x);
                for (d, &u) in g.iter_mut().zip(grad) {
                    *d += gy[0] * u;
                }
            }
        }
    }
}
