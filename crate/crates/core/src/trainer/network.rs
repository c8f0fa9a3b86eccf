//! A trainable mirror of a [`Graph`], generic over the float type so that
//! gradients can be checked in f64.

use crate::engine::kernels::{im2col, window_counts, Window};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind, QuantTag};
use crate::linalg::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Layer {
    Input,
    Conv {
        win: Window,
        groups: usize,
        cin: usize,
        cout: usize,
        bias: bool,
    },
    Depthwise {
        win: Window,
        c: usize,
        bias: bool,
    },
    Fc {
        fin: usize,
        fout: usize,
    },
    BatchNorm {
        c: usize,
        eps: f64,
    },
    Relu,
    Relu6,
    Silu,
    MaxPool {
        win: Window,
        c: usize,
    },
    AvgPool {
        win: Window,
        c: usize,
    },
    GlobalAvgPool {
        hw: usize,
        c: usize,
    },
    Add,
    Concat {
        /// Channels of each operand; rows are pixels.
        inners: Vec<usize>,
    },
    /// Squeeze-and-excite with `r` hidden units.
    SqueezeExcite {
        hw: usize,
        c: usize,
        r: usize,
    },
    /// Final softmax; folded into the loss, never evaluated here.
    Softmax,
}

/// Values a layer's backward pass needs beyond its input and output.
#[derive(Debug, Clone, Default)]
enum Aux<T> {
    #[default]
    None,
    Col(Vec<T>),
    Argmax(Vec<usize>),
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    SqueezeExcite {
        pooled: Vec<T>,
        hidden: Vec<T>,
        gate: Vec<T>,
    },
}

/// Per-node gradients of the trainable slots, plus the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Vec<Vec<T>>>,
    pub input: Vec<T>,
}

/// Batch-norm statistics observed in a training forward pass, per node.
pub type BatchStats<T> = Vec<Option<(Vec<T>, Vec<T>)>>;

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    layers: Vec<Layer>,
    inputs: Vec<Vec<usize>>,
    /// Per-sample element count of every node output.
    sizes: Vec<usize>,
    /// Trainable tensors per node, in weight-slot order.
    pub params: Vec<Vec<Vec<T>>>,
    /// Running mean and variance of batch-norm nodes.
    pub running: Vec<Option<(Vec<T>, Vec<T>)>>,
    logits: usize,
    num_classes: usize,
}

fn to_t<T: Scalar>(t: &Tensor, what: &str) -> Result<Vec<T>> {
    Ok(t.expect_f32(what)?.iter().map(|&v| T::from_f32(v)).collect())
}

#[inline]
fn lit<T: Scalar>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

impl<T: Scalar> Network<T> {
    /// Mirrors `g`. A trailing softmax is folded into the loss; the logits
    /// are its input.
    pub fn from_graph(g: &Graph) -> Result<Self> {
        if g.meta.quant != QuantTag::None {
            return Err(Error::InvalidState(format!(
                "training needs an unquantized graph, found `{}`",
                g.meta.quant
            )));
        }
        let shapes = g.validate()?;
        let index = g.index_map();
        let out = index[g.output_id()?];
        let logits = match g.nodes[out].kind {
            NodeKind::Softmax => index[g.nodes[out].inputs[0].as_str()],
            _ => out,
        };
        let mut layers = Vec::new();
        let mut inputs = Vec::new();
        let mut params = Vec::new();
        let mut running = Vec::new();
        for (i, node) in g.nodes.iter().enumerate() {
            let ins: Vec<usize> = node.inputs.iter().map(|s| index[s.as_str()]).collect();
            let in_shape = ins.first().map(|&j| shapes[j]).unwrap_or([0; 4]);
            let [_, h, w, ch] = in_shape;
            let unsupported = || {
                Error::UnsupportedPattern(format!(
                    "node `{}` ({}) cannot be trained",
                    node.id,
                    node.kind.name()
                ))
            };
            let layer = match node.kind {
                NodeKind::Input => Layer::Input,
                NodeKind::Conv2D {
                    kh,
                    kw,
                    stride,
                    pad,
                    groups,
                    has_bias,
                } => Layer::Conv {
                    win: Window::new(h, w, kh, kw, stride, pad)?,
                    groups,
                    cin: ch,
                    cout: shapes[i][3],
                    bias: has_bias,
                },
                NodeKind::DepthwiseConv2D {
                    kh,
                    kw,
                    stride,
                    pad,
                    has_bias,
                } => Layer::Depthwise {
                    win: Window::new(h, w, kh, kw, stride, pad)?,
                    c: ch,
                    bias: has_bias,
                },
                NodeKind::FullyConnected => Layer::Fc {
                    fin: h * w * ch,
                    fout: shapes[i][3],
                },
                NodeKind::BatchNorm { eps } => Layer::BatchNorm { c: ch, eps: eps as f64 },
                NodeKind::ReLU => Layer::Relu,
                NodeKind::ReLU6 => Layer::Relu6,
                NodeKind::SiLU => Layer::Silu,
                NodeKind::MaxPool { k, stride, pad } => Layer::MaxPool {
                    win: Window::new(h, w, k, k, stride, pad)?,
                    c: ch,
                },
                NodeKind::AvgPool { k, stride, pad } => Layer::AvgPool {
                    win: Window::new(h, w, k, k, stride, pad)?,
                    c: ch,
                },
                NodeKind::GlobalAvgPool => Layer::GlobalAvgPool { hw: h * w, c: ch },
                NodeKind::Add => Layer::Add,
                NodeKind::Concat { axis: 3 } => Layer::Concat {
                    inners: ins.iter().map(|&j| shapes[j][3]).collect(),
                },
                NodeKind::SqueezeExcite { reduced } => Layer::SqueezeExcite {
                    hw: h * w,
                    c: ch,
                    r: reduced,
                },
                NodeKind::Softmax if i == out => Layer::Softmax,
                _ => return Err(unsupported()),
            };
            let slots = node.kind.trainable_slots();
            params.push(
                node.weights[..slots]
                    .iter()
                    .enumerate()
                    .map(|(s, t)| to_t(t, &node.weight_name(s)))
                    .collect::<Result<Vec<_>>>()?,
            );
            running.push(match node.kind {
                NodeKind::BatchNorm { .. } => Some((
                    to_t(&node.weights[2], &node.weight_name(2))?,
                    to_t(&node.weights[3], &node.weight_name(3))?,
                )),
                _ => None,
            });
            layers.push(layer);
            inputs.push(ins);
        }
        let sizes = shapes.iter().map(|s| s[1] * s[2] * s[3]).collect();
        Ok(Network {
            layers,
            inputs,
            sizes,
            params,
            running,
            logits,
            num_classes: shapes[logits][3] * shapes[logits][1] * shapes[logits][2],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    /// Writes parameters and running statistics back into a copy of `g`.
    pub fn to_graph(&self, g: &Graph) -> Result<Graph> {
        let mut out = g.clone();
        for (i, node) in out.nodes.iter_mut().enumerate() {
            for (s, p) in self.params[i].iter().enumerate() {
                let shape = node.weights[s].shape().to_vec();
                node.weights[s] = Tensor::from_f32(shape, p.iter().map(|&v| <T as Scalar>::to_f32(v)).collect())?;
            }
            if let Some((mean, var)) = &self.running[i] {
                node.weights[2] = Tensor::from_f32(vec![mean.len()], mean.iter().map(|&v| <T as Scalar>::to_f32(v)).collect())?;
                node.weights[3] = Tensor::from_f32(vec![var.len()], var.iter().map(|&v| <T as Scalar>::to_f32(v)).collect())?;
            }
        }
        Ok(out)
    }

    /// Logits `[n, k]` using running batch-norm statistics.
    pub fn predict(&self, x: &[T], n: usize) -> Vec<T> {
        let (outs, _) = self.forward(x, n, false);
        outs[self.logits].clone()
    }

    /// Mean cross-entropy in training mode (batch statistics).
    pub fn loss(&self, x: &[T], n: usize, labels: &[usize]) -> Result<T> {
        let (outs, _) = self.forward(x, n, true);
        Ok(cross_entropy(&outs[self.logits], n, self.num_classes, labels)?.0)
    }

    /// Training-mode loss, logits, gradients and observed batch-norm stats.
    pub fn loss_and_grads(
        &self,
        x: &[T],
        n: usize,
        labels: &[usize],
    ) -> Result<(T, Vec<T>, Gradients<T>, BatchStats<T>)> {
        let (outs, aux) = self.forward(x, n, true);
        let (loss, dlogits) = cross_entropy(&outs[self.logits], n, self.num_classes, labels)?;
        let grads = self.backward(&outs, &aux, dlogits, n);
        let stats = aux
            .iter()
            .map(|a| match a {
                Aux::BatchNorm { mean, var, .. } => Some((mean.clone(), var.clone())),
                _ => None,
            })
            .collect();
        Ok((loss, outs[self.logits].clone(), grads, stats))
    }

    fn forward(&self, x: &[T], n: usize, train: bool) -> (Vec<Vec<T>>, Vec<Aux<T>>) {
        assert_eq!(x.len(), n * self.sizes[0], "input batch has the wrong length");
        let mut outs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut aux: Vec<Aux<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > self.logits {
                outs.push(Vec::new());
                aux.push(Aux::None);
                continue;
            }
            let ins = &self.inputs[i];
            let xin = ins.first().map(|&j| &outs[j][..]).unwrap_or(x);
            let in_len = ins.first().map_or(0, |&j| self.sizes[j]);
            let p = &self.params[i];
            let (y, a) = match layer {
                Layer::Input => (x.to_vec(), Aux::None),
                Layer::Softmax => unreachable!("softmax follows the logits"),
                Layer::Conv {
                    win,
                    groups: 1,
                    cin,
                    cout,
                    bias,
                } => {
                    let col = batch_im2col(xin, n, in_len, *cin, win);
                    let rows = n * win.out_h * win.out_w;
                    let k = win.kh * win.kw * cin;
                    let mut y = vec![T::zero(); rows * cout];
                    T::gemm(rows, k, *cout, T::one(), &col, (k, 1), &p[0], (*cout, 1), T::zero(), &mut y, (*cout, 1));
                    if *bias {
                        add_bias(&mut y, &p[1]);
                    }
                    (y, Aux::Col(col))
                }
                Layer::Conv {
                    win,
                    groups,
                    cin,
                    cout,
                    bias,
                } => {
                    let b = bias.then(|| &p[1][..]);
                    (grouped_conv(xin, n, in_len, *cin, &p[0], b, *cout, *groups, win), Aux::None)
                }
                Layer::Depthwise { win, c, bias } => {
                    let b = bias.then(|| &p[1][..]);
                    (depthwise(xin, n, in_len, *c, &p[0], b, win), Aux::None)
                }
                Layer::Fc { fin, fout } => {
                    let mut y = vec![T::zero(); n * fout];
                    T::gemm(n, *fin, *fout, T::one(), xin, (*fin, 1), &p[0], (*fout, 1), T::zero(), &mut y, (*fout, 1));
                    add_bias(&mut y, &p[1]);
                    (y, Aux::None)
                }
                Layer::BatchNorm { c, eps } => {
                    if train {
                        bn_train(xin, *c, *eps, &p[0], &p[1])
                    } else {
                        let (mean, var) = self.running[i].as_ref().expect("bn keeps running stats");
                        (bn_eval(xin, *c, *eps, &p[0], &p[1], mean, var), Aux::None)
                    }
                }
                Layer::Relu => (xin.iter().map(|&v| v.max(T::zero())).collect(), Aux::None),
                Layer::Relu6 => (
                    xin.iter().map(|&v| v.max(T::zero()).min(lit(6.0))).collect(),
                    Aux::None,
                ),
                Layer::Silu => (xin.iter().map(|&v| v * sigmoid(v)).collect(), Aux::None),
                Layer::MaxPool { win, c } => {
                    let (y, idx) = max_pool(xin, n, in_len, *c, win);
                    (y, Aux::Argmax(idx))
                }
                Layer::AvgPool { win, c } => (avg_pool(xin, n, in_len, *c, win), Aux::None),
                Layer::GlobalAvgPool { hw, c } => {
                    let inv = T::one() / T::from(*hw).expect("count");
                    let mut y = vec![T::zero(); n * c];
                    for (s, out) in y.chunks_exact_mut(*c).enumerate() {
                        for px in xin[s * in_len..][..in_len].chunks_exact(*c) {
                            out.iter_mut().zip(px).for_each(|(o, &v)| *o = *o + v);
                        }
                        out.iter_mut().for_each(|o| *o = *o * inv);
                    }
                    (y, Aux::None)
                }
                Layer::SqueezeExcite { hw, c, r } => se_forward(xin, n, *hw, *c, *r, p),
                Layer::Add => {
                    let b = &outs[ins[1]];
                    (xin.iter().zip(b).map(|(&a, &b)| a + b).collect(), Aux::None)
                }
                Layer::Concat { inners } => {
                    let total: usize = inners.iter().sum();
                    let pixels = n * self.sizes[i] / total;
                    let mut y = Vec::with_capacity(n * self.sizes[i]);
                    for px in 0..pixels {
                        for (&j, &inner) in ins.iter().zip(inners) {
                            y.extend_from_slice(&outs[j][px * inner..][..inner]);
                        }
                    }
                    (y, Aux::None)
                }
            };
            outs.push(y);
            aux.push(a);
        }
        (outs, aux)
    }

    fn backward(&self, outs: &[Vec<T>], aux: &[Aux<T>], dlogits: Vec<T>, n: usize) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.layers.len()];
        grads[self.logits] = Some(dlogits);
        let mut pgrads: Vec<Vec<Vec<T>>> = self
            .params
            .iter()
            .map(|ps| ps.iter().map(|p| vec![T::zero(); p.len()]).collect())
            .collect();
        let mut input_grad = vec![T::zero(); n * self.sizes[0]];

        for i in (0..=self.logits).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let ins = &self.inputs[i];
            let in_len = ins.first().map_or(0, |&j| self.sizes[j]);
            let x = ins.first().map(|&j| &outs[j][..]);
            let p = &self.params[i];
            let pg = &mut pgrads[i];
            // gradients with respect to each input, in input order
            let dxs: Vec<Vec<T>> = match &self.layers[i] {
                Layer::Input => {
                    input_grad.iter_mut().zip(&dy).for_each(|(g, &d)| *g = *g + d);
                    vec![]
                }
                Layer::Softmax => unreachable!("softmax follows the logits"),
                Layer::Conv {
                    win,
                    groups: 1,
                    cin,
                    cout,
                    bias,
                } => {
                    let Aux::Col(col) = &aux[i] else { unreachable!() };
                    let rows = n * win.out_h * win.out_w;
                    let k = win.kh * win.kw * cin;
                    T::gemm(k, rows, *cout, T::one(), col, (1, k), &dy, (*cout, 1), T::zero(), &mut pg[0], (*cout, 1));
                    if *bias {
                        sum_rows(&dy, &mut pg[1]);
                    }
                    let mut dcol = vec![T::zero(); rows * k];
                    T::gemm(rows, *cout, k, T::one(), &dy, (*cout, 1), &p[0], (1, *cout), T::zero(), &mut dcol, (k, 1));
                    vec![batch_col2im(&dcol, n, in_len, *cin, win)]
                }
                Layer::Conv {
                    win,
                    groups,
                    cin,
                    cout,
                    bias,
                } => {
                    if *bias {
                        sum_rows(&dy, &mut pg[1]);
                    }
                    let (dx, dw) = grouped_conv_backward(x.unwrap(), &dy, n, in_len, *cin, &p[0], *cout, *groups, win);
                    pg[0] = dw;
                    vec![dx]
                }
                Layer::Depthwise { win, c, bias } => {
                    if *bias {
                        sum_rows(&dy, &mut pg[1]);
                    }
                    let (dx, dw) = depthwise_backward(x.unwrap(), &dy, n, in_len, *c, &p[0], win);
                    pg[0] = dw;
                    vec![dx]
                }
                Layer::Fc { fin, fout } => {
                    let x = x.unwrap();
                    T::gemm(*fin, n, *fout, T::one(), x, (1, *fin), &dy, (*fout, 1), T::zero(), &mut pg[0], (*fout, 1));
                    sum_rows(&dy, &mut pg[1]);
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, *fout, *fin, T::one(), &dy, (*fout, 1), &p[0], (1, *fout), T::zero(), &mut dx, (*fin, 1));
                    vec![dx]
                }
                Layer::BatchNorm { c, .. } => {
                    let Aux::BatchNorm { xhat, inv_std, .. } = &aux[i] else { unreachable!() };
                    vec![bn_backward(&dy, xhat, inv_std, &p[0], *c, pg)]
                }
                Layer::Relu => vec![dy.iter().zip(&outs[i]).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect()],
                Layer::Relu6 => {
                    let six = lit(6.0);
                    vec![dy
                        .iter()
                        .zip(x.unwrap())
                        .map(|(&d, &v)| if v > T::zero() && v < six { d } else { T::zero() })
                        .collect()]
                }
                Layer::Silu => vec![dy
                    .iter()
                    .zip(x.unwrap())
                    .map(|(&d, &v)| {
                        let s = sigmoid(v);
                        d * s * (T::one() + v * (T::one() - s))
                    })
                    .collect()],
                Layer::MaxPool { .. } => {
                    let Aux::Argmax(idx) = &aux[i] else { unreachable!() };
                    let mut dx = vec![T::zero(); n * in_len];
                    for (&j, &d) in idx.iter().zip(&dy) {
                        dx[j] = dx[j] + d;
                    }
                    vec![dx]
                }
                Layer::AvgPool { win, c } => vec![avg_pool_backward(&dy, n, in_len, *c, win)],
                Layer::GlobalAvgPool { hw, c } => {
                    let inv = T::one() / T::from(*hw).expect("count");
                    let mut dx = vec![T::zero(); n * in_len];
                    for (s, d) in dy.chunks_exact(*c).enumerate() {
                        for px in dx[s * in_len..][..in_len].chunks_exact_mut(*c) {
                            px.iter_mut().zip(d).for_each(|(o, &g)| *o = g * inv);
                        }
                    }
                    vec![dx]
                }
                Layer::SqueezeExcite { hw, c, r } => {
                    let Aux::SqueezeExcite { pooled, hidden, gate } = &aux[i] else { unreachable!() };
                    let cache = SeCache { pooled, hidden, gate };
                    vec![se_backward(x.unwrap(), &dy, n, *hw, *c, *r, p, &cache, pg)]
                }
                Layer::Add => vec![dy.clone(), dy],
                Layer::Concat { inners } => {
                    let total: usize = inners.iter().sum();
                    let pixels = dy.len() / total;
                    let mut parts: Vec<Vec<T>> = inners.iter().map(|&k| Vec::with_capacity(pixels * k)).collect();
                    for row in dy.chunks_exact(total) {
                        let mut off = 0;
                        for (part, &inner) in parts.iter_mut().zip(inners) {
                            part.extend_from_slice(&row[off..off + inner]);
                            off += inner;
                        }
                    }
                    parts
                }
            };
            for (&j, dx) in ins.iter().zip(dxs) {
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, &d)| *a = *a + d),
                    slot @ None => *slot = Some(dx),
                }
            }
        }
        Gradients {
            params: pgrads,
            input: input_grad,
        }
    }
}

/// Per-sample squeeze-and-excite: `x * sigmoid(w2 silu(w1 mean(x) + b1) + b2)`.
fn se_forward<T: Scalar>(x: &[T], n: usize, hw: usize, c: usize, r: usize, p: &[Vec<T>]) -> (Vec<T>, Aux<T>) {
    let inv = T::one() / T::from(hw).expect("count");
    let mut pooled = vec![T::zero(); n * c];
    for (s, pool) in pooled.chunks_exact_mut(c).enumerate() {
        for px in x[s * hw * c..][..hw * c].chunks_exact(c) {
            pool.iter_mut().zip(px).for_each(|(o, &v)| *o = *o + v);
        }
        pool.iter_mut().for_each(|o| *o = *o * inv);
    }
    let mut hidden = vec![T::zero(); n * r];
    T::gemm(n, c, r, T::one(), &pooled, (c, 1), &p[0], (r, 1), T::zero(), &mut hidden, (r, 1));
    add_bias(&mut hidden, &p[1]);
    let act: Vec<T> = hidden.iter().map(|&v| v * sigmoid(v)).collect();
    let mut gate = vec![T::zero(); n * c];
    T::gemm(n, r, c, T::one(), &act, (r, 1), &p[2], (c, 1), T::zero(), &mut gate, (c, 1));
    add_bias(&mut gate, &p[3]);
    gate.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut y = Vec::with_capacity(x.len());
    for (s, g) in gate.chunks_exact(c).enumerate() {
        for px in x[s * hw * c..][..hw * c].chunks_exact(c) {
            y.extend(px.iter().zip(g).map(|(&v, &g)| v * g));
        }
    }
    (y, Aux::SqueezeExcite { pooled, hidden, gate })
}

struct SeCache<'a, T> {
    pooled: &'a [T],
    hidden: &'a [T],
    gate: &'a [T],
}

#[allow(clippy::too_many_arguments)]
fn se_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    hw: usize,
    c: usize,
    r: usize,
    p: &[Vec<T>],
    cache: &SeCache<'_, T>,
    pg: &mut [Vec<T>],
) -> Vec<T> {
    let plane = hw * c;
    let mut dx = vec![T::zero(); n * plane];
    let mut dz = vec![T::zero(); n * c];
    for s in 0..n {
        let g = &cache.gate[s * c..][..c];
        let dzs = &mut dz[s * c..][..c];
        for (px, (xs, dys)) in x[s * plane..][..plane]
            .chunks_exact(c)
            .zip(dy[s * plane..][..plane].chunks_exact(c))
            .enumerate()
        {
            let dxs = &mut dx[s * plane + px * c..][..c];
            for ch in 0..c {
                dxs[ch] = dys[ch] * g[ch];
                dzs[ch] = dzs[ch] + dys[ch] * xs[ch];
            }
        }
        for ch in 0..c {
            dzs[ch] = dzs[ch] * g[ch] * (T::one() - g[ch]);
        }
    }
    let act: Vec<T> = cache.hidden.iter().map(|&v| v * sigmoid(v)).collect();
    T::gemm(r, n, c, T::one(), &act, (1, r), &dz, (c, 1), T::zero(), &mut pg[2], (c, 1));
    sum_rows(&dz, &mut pg[3]);
    let mut dh = vec![T::zero(); n * r];
    T::gemm(n, c, r, T::one(), &dz, (c, 1), &p[2], (1, c), T::zero(), &mut dh, (r, 1));
    for (d, &v) in dh.iter_mut().zip(cache.hidden) {
        let sg = sigmoid(v);
        *d = *d * sg * (T::one() + v * (T::one() - sg));
    }
    T::gemm(c, n, r, T::one(), cache.pooled, (1, c), &dh, (r, 1), T::zero(), &mut pg[0], (r, 1));
    sum_rows(&dh, &mut pg[1]);
    let mut dp = vec![T::zero(); n * c];
    T::gemm(n, r, c, T::one(), &dh, (r, 1), &p[0], (1, r), T::zero(), &mut dp, (c, 1));
    let inv = T::one() / T::from(hw).expect("count");
    for s in 0..n {
        let dps = &dp[s * c..][..c];
        for px in dx[s * plane..][..plane].chunks_exact_mut(c) {
            px.iter_mut().zip(dps).for_each(|(o, &d)| *o = *o + d * inv);
        }
    }
    dx
}

/// Mean softmax cross-entropy over `n` rows of `k` logits and its gradient
/// `(softmax - one_hot) / n`.
pub fn cross_entropy<T: Scalar>(logits: &[T], n: usize, k: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if k < 2 || logits.len() != n * k || labels.len() != n || n == 0 {
        return Err(Error::invalid(format!(
            "cross entropy needs n x k logits with k >= 2 and n labels (n={n}, k={k}, {} logits, {} labels)",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::one() / T::from(n).expect("count");
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss = loss + (lse - row[label]);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(o, &b)| *o = *o + b);
    }
}

fn sum_rows<T: Scalar>(dy: &[T], out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for row in dy.chunks_exact(out.len()) {
        out.iter_mut().zip(row).for_each(|(o, &d)| *o = *o + d);
    }
}

fn batch_im2col<T: Scalar>(x: &[T], n: usize, in_len: usize, cin: usize, win: &Window) -> Vec<T> {
    let mut col = Vec::with_capacity(n * win.out_h * win.out_w * win.kh * win.kw * cin);
    for s in 0..n {
        col.extend(im2col(&x[s * in_len..][..in_len], cin, win));
    }
    col
}

fn batch_col2im<T: Scalar>(dcol: &[T], n: usize, in_len: usize, cin: usize, win: &Window) -> Vec<T> {
    let k = win.kh * win.kw * cin;
    let mut dx = vec![T::zero(); n * in_len];
    for s in 0..n {
        let d = &mut dx[s * in_len..][..in_len];
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let row = &dcol[((s * win.out_h + oy) * win.out_w + ox) * k..][..k];
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let dst = &mut d[(iy * win.in_w + ix) * cin..][..cin];
                        let src = &row[(ky * win.kw + kx) * cin..][..cin];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn grouped_conv<T: Scalar>(
    x: &[T],
    n: usize,
    in_len: usize,
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    groups: usize,
    win: &Window,
) -> Vec<T> {
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let out_len = win.out_h * win.out_w * cout;
    let mut y = vec![T::zero(); n * out_len];
    for s in 0..n {
        let xs = &x[s * in_len..][..in_len];
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                for co in 0..cout {
                    let g = co / cout_g;
                    let mut acc = bias.map_or(T::zero(), |b| b[co]);
                    for ky in 0..win.kh {
                        let Some(iy) = win.src_y(oy, ky) else { continue };
                        for kx in 0..win.kw {
                            let Some(ix) = win.src_x(ox, kx) else { continue };
                            let xb = (iy * win.in_w + ix) * cin + g * cin_g;
                            let wb = (ky * win.kw + kx) * cin_g;
                            for ci in 0..cin_g {
                                acc = acc + xs[xb + ci] * w[(wb + ci) * cout + co];
                            }
                        }
                    }
                    y[s * out_len + (oy * win.out_w + ox) * cout + co] = acc;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn grouped_conv_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    in_len: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    groups: usize,
    win: &Window,
) -> (Vec<T>, Vec<T>) {
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let out_len = win.out_h * win.out_w * cout;
    let mut dx = vec![T::zero(); n * in_len];
    let mut dw = vec![T::zero(); w.len()];
    for s in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                for co in 0..cout {
                    let d = dy[s * out_len + (oy * win.out_w + ox) * cout + co];
                    let g = co / cout_g;
                    for ky in 0..win.kh {
                        let Some(iy) = win.src_y(oy, ky) else { continue };
                        for kx in 0..win.kw {
                            let Some(ix) = win.src_x(ox, kx) else { continue };
                            let xb = s * in_len + (iy * win.in_w + ix) * cin + g * cin_g;
                            let wb = (ky * win.kw + kx) * cin_g;
                            for ci in 0..cin_g {
                                let wi = (wb + ci) * cout + co;
                                dw[wi] = dw[wi] + d * x[xb + ci];
                                dx[xb + ci] = dx[xb + ci] + d * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn depthwise<T: Scalar>(x: &[T], n: usize, in_len: usize, c: usize, w: &[T], bias: Option<&[T]>, win: &Window) -> Vec<T> {
    let out_len = win.out_h * win.out_w * c;
    let mut y = vec![T::zero(); n * out_len];
    for s in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let o = &mut y[s * out_len + (oy * win.out_w + ox) * c..][..c];
                if let Some(b) = bias {
                    o.copy_from_slice(b);
                }
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let xs = &x[s * in_len + (iy * win.in_w + ix) * c..][..c];
                        let ws = &w[(ky * win.kw + kx) * c..][..c];
                        for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                            *o = *o + xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    in_len: usize,
    c: usize,
    w: &[T],
    win: &Window,
) -> (Vec<T>, Vec<T>) {
    let out_len = win.out_h * win.out_w * c;
    let mut dx = vec![T::zero(); n * in_len];
    let mut dw = vec![T::zero(); w.len()];
    for s in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let d = &dy[s * out_len + (oy * win.out_w + ox) * c..][..c];
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let xo = s * in_len + (iy * win.in_w + ix) * c;
                        let wo = (ky * win.kw + kx) * c;
                        for ch in 0..c {
                            dw[wo + ch] = dw[wo + ch] + d[ch] * x[xo + ch];
                            dx[xo + ch] = dx[xo + ch] + d[ch] * w[wo + ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn bn_train<T: Scalar>(x: &[T], c: usize, eps: f64, gamma: &[T], beta: &[T]) -> (Vec<T>, Aux<T>) {
    let m = x.len() / c;
    let inv_m = T::one() / T::from(m).expect("count");
    let mut mean = vec![T::zero(); c];
    for px in x.chunks_exact(c) {
        mean.iter_mut().zip(px).for_each(|(a, &v)| *a = *a + v);
    }
    mean.iter_mut().for_each(|a| *a = *a * inv_m);
    let mut var = vec![T::zero(); c];
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let d = px[ch] - mean[ch];
            var[ch] = var[ch] + d * d;
        }
    }
    var.iter_mut().for_each(|a| *a = *a * inv_m);
    let eps: T = c_eps(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    (
        y,
        Aux::BatchNorm {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

fn c_eps<T: Scalar>(eps: f64) -> T {
    // the graph stores eps as f32; use that exact value in every precision
    T::from_f32(eps as f32)
}

fn bn_eval<T: Scalar>(x: &[T], c: usize, eps: f64, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> Vec<T> {
    let eps: T = c_eps(eps);
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (var[ch] + eps).sqrt()).collect();
    x.chunks_exact(c)
        .flat_map(|px| (0..c).map(|ch| (px[ch] - mean[ch]) * scale[ch] + beta[ch]).collect::<Vec<_>>())
        .collect()
}

fn bn_backward<T: Scalar>(dy: &[T], xhat: &[T], inv_std: &[T], gamma: &[T], c: usize, pg: &mut [Vec<T>]) -> Vec<T> {
    let m = dy.len() / c;
    let mt = T::from(m).expect("count");
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (d, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_dy[ch] = sum_dy[ch] + d[ch];
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + d[ch] * h[ch];
        }
    }
    pg[0] = sum_dy_xhat.clone();
    pg[1] = sum_dy.clone();
    let k: Vec<T> = (0..c).map(|ch| gamma[ch] * inv_std[ch] / mt).collect();
    let mut dx = Vec::with_capacity(dy.len());
    for (d, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dx.push(k[ch] * (mt * d[ch] - sum_dy[ch] - h[ch] * sum_dy_xhat[ch]));
        }
    }
    dx
}

fn max_pool<T: Scalar>(x: &[T], n: usize, in_len: usize, c: usize, win: &Window) -> (Vec<T>, Vec<usize>) {
    let out_len = win.out_h * win.out_w * c;
    let mut y = vec![T::neg_infinity(); n * out_len];
    let mut idx = vec![0usize; n * out_len];
    for s in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let base = s * out_len + (oy * win.out_w + ox) * c;
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let xo = s * in_len + (iy * win.in_w + ix) * c;
                        for ch in 0..c {
                            if x[xo + ch] > y[base + ch] {
                                y[base + ch] = x[xo + ch];
                                idx[base + ch] = xo + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (y, idx)
}

fn avg_pool<T: Scalar>(x: &[T], n: usize, in_len: usize, c: usize, win: &Window) -> Vec<T> {
    let counts = window_counts(win);
    let out_len = win.out_h * win.out_w * c;
    let mut y = vec![T::zero(); n * out_len];
    for s in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let pos = oy * win.out_w + ox;
                let o = &mut y[s * out_len + pos * c..][..c];
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let xs = &x[s * in_len + (iy * win.in_w + ix) * c..][..c];
                        o.iter_mut().zip(xs).for_each(|(a, &v)| *a = *a + v);
                    }
                }
                let inv = T::one() / T::from(counts[pos]).expect("count");
                o.iter_mut().for_each(|a| *a = *a * inv);
            }
        }
    }
    y
}

fn avg_pool_backward<T: Scalar>(dy: &[T], n: usize, in_len: usize, c: usize, win: &Window) -> Vec<T> {
    let counts = window_counts(win);
    let out_len = win.out_h * win.out_w * c;
    let mut dx = vec![T::zero(); n * in_len];
    for s in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let pos = oy * win.out_w + ox;
                let inv = T::one() / T::from(counts[pos]).expect("count");
                let d = &dy[s * out_len + pos * c..][..c];
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let xs = &mut dx[s * in_len + (iy * win.in_w + ix) * c..][..c];
                        xs.iter_mut().zip(d).for_each(|(a, &g)| *a = *a + g * inv);
                    }
                }
            }
        }
    }
    dx
}
