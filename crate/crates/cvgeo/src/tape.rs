//! Minimal tape-based reverse-mode autodiff over `ndarray` tensors.
//!
//! The network code in this crate is small and fixed, so instead of pulling
//! in a deep-learning framework we record each forward operation on a
//! [`Tape`] and replay it backwards. Everything is `f64`; that is what makes
//! the finite-difference gradient checks in the test suite meaningful.
//!
//! A [`Var`] is an index into the tape. Operations compute their value
//! eagerly and register a closure that maps the output gradient to gradient
//! contributions for each parent.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix4};

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tape, &ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records a single forward pass; dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every tape node that needs one.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if `v` required one and was reached by backprop.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that participates in differentiation (a learnable parameter).
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf treated as a constant (inputs, targets, frozen buffers).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Runs backprop from a scalar root and returns per-node gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // not reachable from the root
            };
            for (parent, contrib) in backward(self, &g) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match grads[parent].as_mut() {
                    Some(acc) => *acc += &contrib,
                    None => grads[parent] = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs_grad(&[a, b]);
        let back: BackwardFn = Box::new(move |_t, g| vec![(a.0, g.clone()), (b.0, g.clone())]);
        Ok(self.push(value, rg, rg.then_some(back)))
    }

    /// Multiplies by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = &self.nodes[x.0].value * k;
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |_t, g| vec![(x.0, g * k)]);
        self.push(value, rg, rg.then_some(back))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |t, g| {
            let mut gx = g.clone();
            gx.zip_mut_with(t.value(x), |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![(x.0, gx)]
        });
        self.push(value, rg, rg.then_some(back))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(sigmoid);
        let rg = self.needs_grad(&[x]);
        let out_val = value.clone();
        let back: BackwardFn = Box::new(move |_t, g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&out_val, |gv, &y| *gv *= y * (1.0 - y));
            vec![(x.0, gx)]
        });
        self.push(value, rg, rg.then_some(back))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = ArrayD::from_elem(vec![1], self.nodes[x.0].value.sum());
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |t, g| {
            let gv = g[[0]];
            vec![(x.0, ArrayD::from_elem(t.value(x).raw_dim(), gv))]
        });
        self.push(value, rg, rg.then_some(back))
    }

    /// Inner product with a fixed tensor; used as a generic scalar probe.
    pub fn dot_const(&mut self, x: Var, probe: &ArrayD<f64>) -> Result<Var> {
        if self.shape(x) != probe.shape() {
            return Err(shape_err(
                "dot_const",
                format!("{:?} vs {:?}", self.shape(x), probe.shape()),
            ));
        }
        let value = ArrayD::from_elem(vec![1], (&self.nodes[x.0].value * probe).sum());
        let rg = self.needs_grad(&[x]);
        let probe = probe.clone();
        let back: BackwardFn = Box::new(move |_t, g| vec![(x.0, &probe * g[[0]])]);
        Ok(self.push(value, rg, rg.then_some(back)))
    }

    // ---- dense ----------------------------------------------------------

    /// `(B, I) x (I, O) -> (B, O)` matrix product.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = as_2d(self.value(x), "matmul lhs")?;
        let wv = as_2d(self.value(w), "matmul rhs")?;
        if xv.ncols() != wv.nrows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", xv.shape(), wv.shape()),
            ));
        }
        let value = xv.dot(&wv).into_dyn();
        let rg = self.needs_grad(&[x, w]);
        let back: BackwardFn = Box::new(move |t, g| {
            let g2 = as_2d(g, "matmul grad").expect("grad rank");
            let xv = as_2d(t.value(x), "matmul lhs").expect("lhs rank");
            let wv = as_2d(t.value(w), "matmul rhs").expect("rhs rank");
            vec![
                (x.0, g2.dot(&wv.t()).into_dyn()),
                (w.0, xv.t().dot(&g2).into_dyn()),
            ]
        });
        Ok(self.push(value, rg, rg.then_some(back)))
    }

    /// Adds a `(O,)` bias to every row of a `(B, O)` matrix.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = as_2d(self.value(x), "add_bias_rows input")?;
        let bv = self.value(bias);
        if bv.ndim() != 1 || bv.len() != xv.ncols() {
            return Err(shape_err(
                "add_bias_rows",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let value = (&xv + &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap()).into_dyn();
        let rg = self.needs_grad(&[x, bias]);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g2 = as_2d(g, "add_bias_rows grad").expect("grad rank");
            vec![(x.0, g.clone()), (bias.0, g2.sum_axis(Axis(0)).into_dyn())]
        });
        Ok(self.push(value, rg, rg.then_some(back)))
    }

    // ---- convolution ----------------------------------------------------

    /// 2-D convolution: `x (B,Cin,H,W)`, `w (Cout,Cin,kh,kw)`, optional
    /// `(Cout,)` bias, with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        let xv = as_4d(self.value(x), "conv2d input")?;
        let wv = as_4d(self.value(w), "conv2d weight")?;
        let (b, cin, h, wi) = xv.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        if cin != wcin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if h + 2 * padding < kh || wi + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wi}"),
            ));
        }
        if let Some(bv) = bias {
            let bval = self.value(bv);
            if bval.ndim() != 1 || bval.len() != cout {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", bval.shape()),
                ));
            }
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wi + 2 * padding - kw) / stride + 1;

        let w_mat = wv
            .to_shape((cout, wcin * kh * kw))
            .expect("weight is contiguous")
            .into_owned();
        let mut value = Array4::<f64>::zeros((b, cout, ho, wo));
        for bi in 0..b {
            let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, padding, ho, wo);
            let out = w_mat.dot(&cols); // (Cout, Ho*Wo)
            value
                .index_axis_mut(Axis(0), bi)
                .assign(&out.to_shape((cout, ho, wo)).expect("contiguous"));
        }
        if let Some(bv) = bias {
            let bval = self.value(bv).clone();
            for c in 0..cout {
                value
                    .slice_mut(ndarray::s![.., c, .., ..])
                    .mapv_inplace(|v| v + bval[[c]]);
            }
        }

        let parents = match bias {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        let rg = self.needs_grad(&parents);
        let back: BackwardFn = Box::new(move |t, g| {
            let g4 = as_4d(g, "conv2d grad").expect("grad rank");
            let xv = as_4d(t.value(x), "conv2d input").expect("input rank");
            let wv = as_4d(t.value(w), "conv2d weight").expect("weight rank");
            let (b, cin, h, wi) = xv.dim();
            let (cout, _, kh, kw) = wv.dim();
            let w_mat = wv
                .to_shape((cout, cin * kh * kw))
                .expect("contiguous")
                .into_owned();
            let mut gw_mat = Array2::<f64>::zeros((cout, cin * kh * kw));
            let mut gx = Array4::<f64>::zeros((b, cin, h, wi));
            for bi in 0..b {
                let g_mat = g4
                    .index_axis(Axis(0), bi)
                    .to_shape((cout, ho * wo))
                    .expect("contiguous")
                    .into_owned();
                let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, padding, ho, wo);
                gw_mat += &g_mat.dot(&cols.t());
                let gcols = w_mat.t().dot(&g_mat);
                col2im(
                    &gcols,
                    &mut gx.index_axis_mut(Axis(0), bi),
                    kh,
                    kw,
                    stride,
                    padding,
                    ho,
                    wo,
                );
            }
            let mut out = vec![
                (x.0, gx.into_dyn()),
                (
                    w.0,
                    gw_mat
                        .into_shape_with_order((cout, cin, kh, kw))
                        .expect("contiguous")
                        .into_dyn(),
                ),
            ];
            if let Some(bv) = bias {
                let gb: Array1<f64> = (0..cout)
                    .map(|c| g4.slice(ndarray::s![.., c, .., ..]).sum())
                    .collect();
                out.push((bv.0, gb.into_dyn()));
            }
            out
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    // ---- pooling and broadcasts ------------------------------------------

    /// Per-channel spatial mean: `(B,C,H,W) -> (B,C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = as_4d(self.value(x), "global_avg_pool")?;
        let (b, c, h, w) = xv.dim();
        let n = (h * w) as f64;
        let mut value = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                value[[bi, ci]] = xv.slice(ndarray::s![bi, ci, .., ..]).sum() / n;
            }
        }
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g2 = as_2d(g, "gap grad").expect("grad rank");
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    gx.slice_mut(ndarray::s![bi, ci, .., ..])
                        .fill(g2[[bi, ci]] / n);
                }
            }
            vec![(x.0, gx.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Mean over the channel axis: `(B,C,H,W) -> (B,1,H,W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xv = as_4d(self.value(x), "channel_mean")?;
        let (b, c, h, w) = xv.dim();
        let value = (xv.sum_axis(Axis(1)) / c as f64)
            .into_shape_with_order((b, 1, h, w))
            .expect("contiguous");
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g4 = as_4d(g, "channel_mean grad").expect("grad rank");
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            for ci in 0..c {
                gx.slice_mut(ndarray::s![.., ci, .., ..])
                    .assign(&(&g4.index_axis(Axis(1), 0) / c as f64));
            }
            vec![(x.0, gx.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Max over the channel axis: `(B,1,H,W)`; ties route the gradient to the
    /// lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xv = as_4d(self.value(x), "channel_max")?;
        let (b, c, h, w) = xv.dim();
        let mut value = Array4::<f64>::zeros((b, 1, h, w));
        let mut argmax = Array3::<usize>::zeros((b, h, w));
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let mut best = xv[[bi, 0, hi, wi]];
                    let mut best_c = 0;
                    for ci in 1..c {
                        let v = xv[[bi, ci, hi, wi]];
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    value[[bi, 0, hi, wi]] = best;
                    argmax[[bi, hi, wi]] = best_c;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g4 = as_4d(g, "channel_max grad").expect("grad rank");
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        gx[[bi, argmax[[bi, hi, wi]], hi, wi]] = g4[[bi, 0, hi, wi]];
                    }
                }
            }
            vec![(x.0, gx.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Concatenates `(B,Ci,H,W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat_channels: no inputs".into()));
        }
        let first = as_4d(self.value(parts[0]), "concat_channels")?.dim();
        let mut channels = vec![];
        for &p in parts {
            let d = as_4d(self.value(p), "concat_channels")?.dim();
            if (d.0, d.2, d.3) != (first.0, first.2, first.3) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", d, first),
                ));
            }
            channels.push(d.1);
        }
        let views: Vec<_> = parts
            .iter()
            .map(|&p| {
                self.value(p)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("rank checked")
            })
            .collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("shapes checked");
        let parents: Vec<Var> = parts.to_vec();
        let rg = self.needs_grad(&parents);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g4 = as_4d(g, "concat grad").expect("grad rank");
            let mut out = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for (i, &p) in parents.iter().enumerate() {
                let slice = g4
                    .slice(ndarray::s![.., offset..offset + channels[i], .., ..])
                    .to_owned();
                out.push((p.0, slice.into_dyn()));
                offset += channels[i];
            }
            out
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Channel slice `lo..hi` of a `(B,C,H,W)` tensor.
    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let xv = as_4d(self.value(x), "slice_channels")?;
        let (b, c, h, w) = xv.dim();
        if lo >= hi || hi > c {
            return Err(shape_err(
                "slice_channels",
                format!("range {lo}..{hi} for {c} channels"),
            ));
        }
        let value = xv.slice(ndarray::s![.., lo..hi, .., ..]).to_owned();
        let rg = self.needs_grad(&[x]);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g4 = as_4d(g, "slice grad").expect("grad rank");
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            gx.slice_mut(ndarray::s![.., lo..hi, .., ..]).assign(&g4);
            vec![(x.0, gx.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Scales each channel: `(B,C,H,W) * (B,C) -> (B,C,H,W)`.
    pub fn scale_by_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = as_4d(self.value(x), "scale_by_channel input")?;
        let sv = as_2d(self.value(s), "scale_by_channel weights")?;
        let (b, c, h, w) = xv.dim();
        if sv.dim() != (b, c) {
            return Err(shape_err(
                "scale_by_channel",
                format!("weights {:?} for input {:?}", sv.dim(), xv.dim()),
            ));
        }
        let mut value = xv.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                value
                    .slice_mut(ndarray::s![bi, ci, .., ..])
                    .mapv_inplace(|v| v * sv[[bi, ci]]);
            }
        }
        let rg = self.needs_grad(&[x, s]);
        let back: BackwardFn = Box::new(move |t, g| {
            let g4 = as_4d(g, "scale_by_channel grad").expect("grad rank");
            let xv = as_4d(t.value(x), "scale_by_channel input").expect("rank");
            let sv = as_2d(t.value(s), "scale_by_channel weights").expect("rank");
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            let mut gs = Array2::<f64>::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    let gslice = g4.slice(ndarray::s![bi, ci, .., ..]);
                    gx.slice_mut(ndarray::s![bi, ci, .., ..])
                        .assign(&(&gslice * sv[[bi, ci]]));
                    gs[[bi, ci]] = (&gslice * &xv.slice(ndarray::s![bi, ci, .., ..])).sum();
                }
            }
            vec![(x.0, gx.into_dyn()), (s.0, gs.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Scales each spatial position: `(B,C,H,W) * (B,1,H,W) -> (B,C,H,W)`.
    pub fn scale_by_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let xv = as_4d(self.value(x), "scale_by_map input")?;
        let mv = as_4d(self.value(m), "scale_by_map weights")?;
        let (b, c, h, w) = xv.dim();
        if mv.dim() != (b, 1, h, w) {
            return Err(shape_err(
                "scale_by_map",
                format!("weights {:?} for input {:?}", mv.dim(), xv.dim()),
            ));
        }
        let mut value = xv.to_owned();
        for ci in 0..c {
            let mut slice = value.slice_mut(ndarray::s![.., ci, .., ..]);
            slice *= &mv.index_axis(Axis(1), 0);
        }
        let rg = self.needs_grad(&[x, m]);
        let back: BackwardFn = Box::new(move |t, g| {
            let g4 = as_4d(g, "scale_by_map grad").expect("grad rank");
            let xv = as_4d(t.value(x), "scale_by_map input").expect("rank");
            let mv = as_4d(t.value(m), "scale_by_map weights").expect("rank");
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            let mut gm = Array4::<f64>::zeros((b, 1, h, w));
            for ci in 0..c {
                gx.slice_mut(ndarray::s![.., ci, .., ..])
                    .assign(&(&g4.index_axis(Axis(1), ci) * &mv.index_axis(Axis(1), 0)));
                let mut gm_acc = gm.slice_mut(ndarray::s![.., 0, .., ..]);
                gm_acc += &(&g4.index_axis(Axis(1), ci) * &xv.index_axis(Axis(1), ci));
            }
            vec![(x.0, gx.into_dyn()), (m.0, gm.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    /// Broadcasts a `(B,C)` vector to `(B,C,H,W)`.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vv = as_2d(self.value(v), "broadcast_spatial")?;
        let (b, c) = vv.dim();
        let mut value = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                value
                    .slice_mut(ndarray::s![bi, ci, .., ..])
                    .fill(vv[[bi, ci]]);
            }
        }
        let rg = self.needs_grad(&[v]);
        let back: BackwardFn = Box::new(move |_t, g| {
            let g4 = as_4d(g, "broadcast grad").expect("grad rank");
            let mut gv = Array2::<f64>::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    gv[[bi, ci]] = g4.slice(ndarray::s![bi, ci, .., ..]).sum();
                }
            }
            vec![(v.0, gv.into_dyn())]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    // ---- batch normalization ---------------------------------------------

    /// Batchnorm using batch statistics. Returns the output plus the batch
    /// mean/variance per channel so callers can update running stats.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let xv = as_4d(self.value(x), "batchnorm input")?;
        let (b, c, h, w) = xv.dim();
        check_bn_params(self.value(scale), self.value(shift), c)?;
        let n = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let slice = xv.slice(ndarray::s![.., ci, .., ..]);
            let m = slice.sum() / n;
            mean[ci] = m;
            var[ci] = slice.mapv(|v| (v - m) * (v - m)).sum() / n;
        }
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xv.to_owned();
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            xhat.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| (v - m) * is);
        }
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        let mut value = xhat.clone();
        for ci in 0..c {
            value
                .slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v * sc[[ci]] + sh[[ci]]);
        }
        let rg = self.needs_grad(&[x, scale, shift]);
        let inv_std_b = inv_std.clone();
        let back: BackwardFn = Box::new(move |t, g| {
            let g4 = as_4d(g, "batchnorm grad").expect("grad rank");
            let scv = t.value(scale);
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            let mut gscale = Array1::<f64>::zeros(c);
            let mut gshift = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let gc = g4.slice(ndarray::s![.., ci, .., ..]);
                let xh = xhat.slice(ndarray::s![.., ci, .., ..]);
                gscale[ci] = (&gc * &xh).sum();
                gshift[ci] = gc.sum();
                // d/dx of scale*(x-mean)/std through the batch statistics
                let gxh = gc.mapv(|v| v * scv[[ci]]);
                let sum_gxh = gxh.sum();
                let sum_gxh_xh = (&gxh * &xh).sum();
                let is = inv_std_b[ci];
                let mut gslice = gx.slice_mut(ndarray::s![.., ci, .., ..]);
                ndarray::Zip::from(&mut gslice)
                    .and(&gxh)
                    .and(&xh)
                    .for_each(|o, &gv, &xv| {
                        *o = is / n * (n * gv - sum_gxh - xv * sum_gxh_xh);
                    });
            }
            vec![
                (x.0, gx.into_dyn()),
                (scale.0, gscale.into_dyn()),
                (shift.0, gshift.into_dyn()),
            ]
        });
        let out = self.push(value.into_dyn(), rg, rg.then_some(back));
        Ok((out, mean, var))
    }

    /// Batchnorm using frozen running statistics (a per-channel affine map).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Result<Var> {
        let xv = as_4d(self.value(x), "batchnorm input")?;
        let (b, c, h, w) = xv.dim();
        check_bn_params(self.value(scale), self.value(shift), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(
                "batchnorm_eval",
                format!("running stats sized {} for {c} channels", running_mean.len()),
            ));
        }
        let inv_std: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xv.to_owned();
        for ci in 0..c {
            let m = running_mean[ci];
            let is = inv_std[ci];
            xhat.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| (v - m) * is);
        }
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        let mut value = xhat.clone();
        for ci in 0..c {
            value
                .slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v * sc[[ci]] + sh[[ci]]);
        }
        let rg = self.needs_grad(&[x, scale, shift]);
        let back: BackwardFn = Box::new(move |t, g| {
            let g4 = as_4d(g, "batchnorm grad").expect("grad rank");
            let scv = t.value(scale);
            let mut gx = Array4::<f64>::zeros((b, c, h, w));
            let mut gscale = Array1::<f64>::zeros(c);
            let mut gshift = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let gc = g4.slice(ndarray::s![.., ci, .., ..]);
                let xh = xhat.slice(ndarray::s![.., ci, .., ..]);
                gscale[ci] = (&gc * &xh).sum();
                gshift[ci] = gc.sum();
                let k = scv[[ci]] * inv_std[ci];
                gx.slice_mut(ndarray::s![.., ci, .., ..])
                    .assign(&gc.mapv(|v| v * k));
            }
            vec![
                (x.0, gx.into_dyn()),
                (scale.0, gscale.into_dyn()),
                (shift.0, gshift.into_dyn()),
            ]
        });
        Ok(self.push(value.into_dyn(), rg, rg.then_some(back)))
    }

    // ---- losses ----------------------------------------------------------

    /// Binary cross-entropy against fixed targets, applied to logits and
    /// averaged over every element. Numerically stable log-sum-exp form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &ArrayD<f64>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(shape_err(
                "bce_with_logits_mean",
                format!("{:?} vs {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let z = &self.nodes[logits.0].value;
        let n = z.len() as f64;
        let mut total = 0.0;
        ndarray::Zip::from(z).and(targets).for_each(|&zv, &tv| {
            total += zv.max(0.0) - zv * tv + (1.0 + (-zv.abs()).exp()).ln();
        });
        let value = ArrayD::from_elem(vec![1], total / n);
        let rg = self.needs_grad(&[logits]);
        let targets = targets.clone();
        let back: BackwardFn = Box::new(move |t, g| {
            let gv = g[[0]];
            let z = t.value(logits);
            let mut gz = z.mapv(sigmoid);
            gz -= &targets;
            gz.mapv_inplace(|v| v * gv / n);
            vec![(logits.0, gz)]
        });
        Ok(self.push(value, rg, rg.then_some(back)))
    }

    /// `sum(mask * (x - target)^2)` over all elements, as a scalar.
    pub fn masked_sq_err_sum(
        &mut self,
        x: Var,
        target: &ArrayD<f64>,
        mask: &ArrayD<f64>,
    ) -> Result<Var> {
        if self.shape(x) != target.shape() || self.shape(x) != mask.shape() {
            return Err(shape_err(
                "masked_sq_err_sum",
                format!(
                    "input {:?}, target {:?}, mask {:?}",
                    self.shape(x),
                    target.shape(),
                    mask.shape()
                ),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let mut total = 0.0;
        ndarray::Zip::from(xv)
            .and(target)
            .and(mask)
            .for_each(|&v, &t, &m| total += m * (v - t) * (v - t));
        let value = ArrayD::from_elem(vec![1], total);
        let rg = self.needs_grad(&[x]);
        let target = target.clone();
        let mask = mask.clone();
        let back: BackwardFn = Box::new(move |t, g| {
            let gv = g[[0]];
            let xv = t.value(x);
            let mut gx = xv.clone();
            ndarray::Zip::from(&mut gx)
                .and(&target)
                .and(&mask)
                .for_each(|o, &tv, &mv| *o = 2.0 * mv * (*o - tv) * gv);
            vec![(x.0, gx)]
        });
        Ok(self.push(value, rg, rg.then_some(back)))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_bn_params(scale: &ArrayD<f64>, shift: &ArrayD<f64>, c: usize) -> Result<()> {
    if scale.ndim() != 1 || scale.len() != c || shift.ndim() != 1 || shift.len() != c {
        return Err(shape_err(
            "batchnorm",
            format!(
                "scale {:?} / shift {:?} for {c} channels",
                scale.shape(),
                shift.shape()
            ),
        ));
    }
    Ok(())
}

fn as_2d<'a>(a: &'a ArrayD<f64>, what: &str) -> Result<ArrayView2<'a, f64>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| shape_err(what, format!("expected rank 2, got {:?}", a.shape())))
}

fn as_4d<'a>(a: &'a ArrayD<f64>, what: &str) -> Result<ndarray::ArrayView4<'a, f64>> {
    a.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err(what, format!("expected rank 4, got {:?}", a.shape())))
}

/// Unrolls conv patches of one image into a `(Cin*kh*kw, Ho*Wo)` matrix.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = gx.dim();
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] += cols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
}

/// Finite-difference utilities used by the test suites to validate analytic
/// gradients. Forward-only on purpose: they must stay independent of the
/// backward implementation they are checking.
pub mod check {
    use ndarray::ArrayD;

    /// Central finite differences of a scalar function at `x`.
    pub fn numeric_grad<F>(mut f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
    where
        F: FnMut(&ArrayD<f64>) -> f64,
    {
        let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let orig = probe.as_slice_mut().unwrap()[idx];
            probe.as_slice_mut().unwrap()[idx] = orig + step;
            let plus = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig - step;
            let minus = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * step);
        }
        grad
    }

    /// Worst relative error between analytic and numeric gradients, with an
    /// absolute floor so exact zeros do not divide by zero.
    pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
        assert_eq!(analytic.shape(), numeric.shape());
        let mut worst = 0.0_f64;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = (a - n).abs();
            if err <= 1e-9 {
                continue;
            }
            worst = worst.max(err / a.abs().max(n.abs()).max(1e-9));
        }
        worst
    }
}
