use serde::{Deserialize, Serialize};

use super::{Classifier, InputShape, Logits};
use crate::error::{Error, Result};
use crate::grid::{Grid3D, Image, RngState};

/// Width of the average-pooling window (and stride) in the conv net.
const CONV_POOL: usize = 2;

/// The toy architecture zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    /// `z = W x + b`.
    Linear,
    /// `z = W2 tanh(W1 x + b1) + b2`.
    Mlp { hidden: usize },
    /// `kernel × kernel` valid convolution with `filters` output maps, tanh,
    /// 2×2 average pooling (stride 2), then a linear read-out.
    Conv { filters: usize, kernel: usize },
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp { .. } => "mlp",
            Architecture::Conv { .. } => "conv",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::Mlp { hidden } => write!(f, "mlp:{hidden}"),
            Architecture::Conv { filters, kernel } => write!(f, "conv:{filters}x{kernel}"),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    /// `linear`, `mlp`, `mlp:<hidden>`, `conv`, `conv:<filters>x<kernel>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad architecture '{s}'"));
        let (head, tail) = s.split_once(':').map_or((s, None), |(h, t)| (h, Some(t)));
        match (head, tail) {
            ("linear", None) => Ok(Architecture::Linear),
            ("mlp", None) => Ok(Architecture::Mlp { hidden: 64 }),
            ("mlp", Some(t)) => Ok(Architecture::Mlp { hidden: t.parse().map_err(|_| bad())? }),
            ("conv", None) => Ok(Architecture::Conv { filters: 8, kernel: 3 }),
            ("conv", Some(t)) => {
                let (f, k) = t.split_once('x').ok_or_else(bad)?;
                Ok(Architecture::Conv {
                    filters: f.parse().map_err(|_| bad())?,
                    kernel: k.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// A named, row-major parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(name: &str, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Param { name: name.to_string(), dims, data: vec![0.0; n] }
    }
}

/// A toy classifier: architecture, input shape, class count and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    arch: Architecture,
    shape: InputShape,
    classes: usize,
    params: Vec<Param>,
}

struct ConvDims {
    out_h: usize,
    out_w: usize,
    pool_h: usize,
    pool_w: usize,
}

fn conv_dims(shape: InputShape, kernel: usize) -> Result<ConvDims> {
    if kernel == 0 || kernel > shape.height || kernel > shape.width {
        return Err(Error::shape(format!("conv kernel {kernel} does not fit {shape:?}")));
    }
    let out_h = shape.height - kernel + 1;
    let out_w = shape.width - kernel + 1;
    let (pool_h, pool_w) = (out_h / CONV_POOL, out_w / CONV_POOL);
    if pool_h == 0 || pool_w == 0 {
        return Err(Error::shape(format!("input {shape:?} too small for conv kernel {kernel} plus pooling")));
    }
    Ok(ConvDims { out_h, out_w, pool_h, pool_w })
}

/// Parameter layout (names and dims) required by an architecture.
pub(crate) fn param_layout(arch: Architecture, shape: InputShape, classes: usize) -> Result<Vec<(&'static str, Vec<usize>)>> {
    if shape.is_empty() {
        return Err(Error::shape("input shape must be positive"));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let n = shape.len();
    Ok(match arch {
        Architecture::Linear => vec![("w", vec![classes, n]), ("b", vec![classes])],
        Architecture::Mlp { hidden } => {
            if hidden == 0 {
                return Err(Error::invalid("mlp hidden width must be positive"));
            }
            vec![
                ("w1", vec![hidden, n]),
                ("b1", vec![hidden]),
                ("w2", vec![classes, hidden]),
                ("b2", vec![classes]),
            ]
        }
        Architecture::Conv { filters, kernel } => {
            if filters == 0 {
                return Err(Error::invalid("conv filter count must be positive"));
            }
            let d = conv_dims(shape, kernel)?;
            vec![
                ("k", vec![filters, kernel, kernel, shape.channels]),
                ("kb", vec![filters]),
                ("w", vec![classes, d.pool_h * d.pool_w * filters]),
                ("b", vec![classes]),
            ]
        }
    })
}

/// Intermediate activations kept for back-propagation.
enum Acts {
    Linear,
    Mlp { hidden: Vec<f64> },
    Conv { act: Vec<f64>, pooled: Vec<f64> },
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| bias[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// `out += Wᵀ d`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let dr = d[r];
        if dr == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += dr * wv;
        }
    }
}

/// `gw += d ⊗ x`, `gb += d`.
fn outer_acc(gw: &mut [f64], gb: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        gb[r] += dr;
        for (g, &xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *g += dr * xv;
        }
    }
}

impl ToyModel {
    /// Model with every parameter zero.
    pub fn zeros(arch: Architecture, shape: InputShape, classes: usize) -> Result<Self> {
        let params = param_layout(arch, shape, classes)?
            .into_iter()
            .map(|(name, dims)| Param::zeros(name, dims))
            .collect();
        Ok(Self { arch, shape, classes, params })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, shape: InputShape, classes: usize, rng: &mut RngState) -> Result<Self> {
        let mut m = Self::zeros(arch, shape, classes)?;
        for p in &mut m.params {
            if p.dims.len() < 2 {
                continue;
            }
            let fan_out = p.dims[0];
            let fan_in: usize = p.dims[1..].iter().product();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.data {
                *v = rng.uniform(-limit, limit);
            }
        }
        Ok(m)
    }

    /// Assemble a model from explicit parameter blocks, validating names and dims.
    pub fn from_params(arch: Architecture, shape: InputShape, classes: usize, params: Vec<Param>) -> Result<Self> {
        let layout = param_layout(arch, shape, classes)?;
        let mut ordered = Vec::with_capacity(layout.len());
        for (name, dims) in layout {
            let p = params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::WeightFile(format!("missing parameter block '{name}' for {arch}")))?;
            if p.dims != dims {
                return Err(Error::WeightFile(format!(
                    "parameter '{name}' has dims {:?}, {arch} on {shape:?} with {classes} classes needs {dims:?}",
                    p.dims
                )));
            }
            if p.data.len() != dims.iter().product::<usize>() {
                return Err(Error::WeightFile(format!("parameter '{name}' payload length mismatch")));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::WeightFile(format!("parameter '{name}' has non-finite values")));
            }
            ordered.push(p.clone());
        }
        if let Some(extra) = params.iter().find(|p| !ordered.iter().any(|o| o.name == p.name)) {
            return Err(Error::WeightFile(format!("unexpected parameter block '{}' for {arch}", extra.name)));
        }
        Ok(Self { arch, shape, classes, params: ordered })
    }

    /// Linear model from a `classes × (H·W·C)` weight matrix and a bias vector.
    pub fn linear(shape: InputShape, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let classes = bias.len();
        let params = vec![
            Param { name: "w".into(), dims: vec![classes, shape.len()], data: weights },
            Param { name: "b".into(), dims: vec![classes], data: bias },
        ];
        Self::from_params(Architecture::Linear, shape, classes, params)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    fn forward_acts(&self, x: &[f64]) -> (Vec<f64>, Acts) {
        let n = self.shape.len();
        let c = self.classes;
        match self.arch {
            Architecture::Linear => (matvec(self.p(0), c, n, x, self.p(1)), Acts::Linear),
            Architecture::Mlp { hidden } => {
                let h: Vec<f64> = matvec(self.p(0), hidden, n, x, self.p(1)).into_iter().map(f64::tanh).collect();
                let z = matvec(self.p(2), c, hidden, &h, self.p(3));
                (z, Acts::Mlp { hidden: h })
            }
            Architecture::Conv { filters, kernel } => {
                let d = conv_dims(self.shape, kernel).expect("validated at construction");
                let (w, ch) = (self.shape.width, self.shape.channels);
                let (k, kb) = (self.p(0), self.p(1));
                // act layout: (i * out_w + j) * filters + f
                let mut act = vec![0.0; d.out_h * d.out_w * filters];
                for i in 0..d.out_h {
                    for j in 0..d.out_w {
                        for f in 0..filters {
                            let mut s = kb[f];
                            for a in 0..kernel {
                                let xrow = ((i + a) * w + j) * ch;
                                let krow = ((f * kernel + a) * kernel) * ch;
                                let span = kernel * ch;
                                s += x[xrow..xrow + span].iter().zip(&k[krow..krow + span]).map(|(p, q)| p * q).sum::<f64>();
                            }
                            act[(i * d.out_w + j) * filters + f] = s.tanh();
                        }
                    }
                }
                let scale = 1.0 / (CONV_POOL * CONV_POOL) as f64;
                let mut pooled = vec![0.0; d.pool_h * d.pool_w * filters];
                for u in 0..d.pool_h {
                    for v in 0..d.pool_w {
                        for f in 0..filters {
                            let mut s = 0.0;
                            for a in 0..CONV_POOL {
                                for b in 0..CONV_POOL {
                                    s += act[((CONV_POOL * u + a) * d.out_w + CONV_POOL * v + b) * filters + f];
                                }
                            }
                            pooled[(u * d.pool_w + v) * filters + f] = s * scale;
                        }
                    }
                }
                let z = matvec(self.p(2), c, pooled.len(), &pooled, self.p(3));
                (z, Acts::Conv { act, pooled })
            }
        }
    }

    /// Back-propagate `d` (gradient w.r.t. logits). Returns the input gradient
    /// and, when `grads` is given, accumulates parameter gradients into it.
    fn backprop(&self, x: &[f64], acts: &Acts, d: &[f64], mut grads: Option<&mut [Vec<f64>]>) -> Vec<f64> {
        let n = self.shape.len();
        let c = self.classes;
        let mut dx = vec![0.0; n];
        match (self.arch, acts) {
            (Architecture::Linear, Acts::Linear) => {
                matvec_t_acc(self.p(0), c, n, d, &mut dx);
                if let Some(g) = grads.as_deref_mut() {
                    let (gw, gb) = g.split_at_mut(1);
                    outer_acc(&mut gw[0], &mut gb[0], d, x);
                }
            }
            (Architecture::Mlp { hidden }, Acts::Mlp { hidden: h }) => {
                let mut dh = vec![0.0; hidden];
                matvec_t_acc(self.p(2), c, hidden, d, &mut dh);
                let dz1: Vec<f64> = dh.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();
                matvec_t_acc(self.p(0), hidden, n, &dz1, &mut dx);
                if let Some(g) = grads.as_deref_mut() {
                    let (first, second) = g.split_at_mut(2);
                    let (gw1, gb1) = first.split_at_mut(1);
                    let (gw2, gb2) = second.split_at_mut(1);
                    outer_acc(&mut gw1[0], &mut gb1[0], &dz1, x);
                    outer_acc(&mut gw2[0], &mut gb2[0], d, h);
                }
            }
            (Architecture::Conv { filters, kernel }, Acts::Conv { act, pooled }) => {
                let dims = conv_dims(self.shape, kernel).expect("validated at construction");
                let (w, ch) = (self.shape.width, self.shape.channels);
                let mut dpool = vec![0.0; pooled.len()];
                matvec_t_acc(self.p(2), c, pooled.len(), d, &mut dpool);
                let scale = 1.0 / (CONV_POOL * CONV_POOL) as f64;
                // Cells beyond the last full pooling window get no gradient.
                let mut dz = vec![0.0; act.len()];
                for u in 0..dims.pool_h {
                    for v in 0..dims.pool_w {
                        for f in 0..filters {
                            let g = dpool[(u * dims.pool_w + v) * filters + f] * scale;
                            for a in 0..CONV_POOL {
                                for b in 0..CONV_POOL {
                                    let idx = ((CONV_POOL * u + a) * dims.out_w + CONV_POOL * v + b) * filters + f;
                                    dz[idx] = g * (1.0 - act[idx] * act[idx]);
                                }
                            }
                        }
                    }
                }
                let k = self.p(0);
                let span = kernel * ch;
                let mut gk = grads.map(|g| g.split_at_mut(2));
                for i in 0..dims.out_h {
                    for j in 0..dims.out_w {
                        for f in 0..filters {
                            let g = dz[(i * dims.out_w + j) * filters + f];
                            if g == 0.0 {
                                continue;
                            }
                            for a in 0..kernel {
                                let xrow = ((i + a) * w + j) * ch;
                                let krow = ((f * kernel + a) * kernel) * ch;
                                for (o, &kv) in dx[xrow..xrow + span].iter_mut().zip(&k[krow..krow + span]) {
                                    *o += g * kv;
                                }
                                if let Some((kparams, _)) = gk.as_mut() {
                                    for (o, &xv) in kparams[0][krow..krow + span].iter_mut().zip(&x[xrow..xrow + span]) {
                                        *o += g * xv;
                                    }
                                }
                            }
                            if let Some((kparams, _)) = gk.as_mut() {
                                kparams[1][f] += g;
                            }
                        }
                    }
                }
                if let Some((_, lin)) = gk {
                    let (gw, gb) = lin.split_at_mut(1);
                    outer_acc(&mut gw[0], &mut gb[0], d, pooled);
                }
            }
            _ => unreachable!("activation cache does not match architecture"),
        }
        dx
    }

    /// Logits plus parameter gradients of `loss_grad(logits)`; used by training.
    pub(crate) fn forward_with_param_grads(
        &self,
        x: &[f64],
        grads: &mut [Vec<f64>],
        d_logits: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let (z, acts) = self.forward_acts(x);
        let d = d_logits(&z);
        self.backprop(x, &acts, &d, Some(grads));
        z
    }
}

impl Classifier for ToyModel {
    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, x: &Image) -> Result<Logits> {
        self.shape.check(x)?;
        Ok(Logits(self.forward_acts(x.values()).0))
    }

    fn backward(&self, x: &Image, d_logits: &[f64]) -> Result<Grid3D> {
        self.shape.check(x)?;
        if d_logits.len() != self.classes {
            return Err(Error::shape(format!("{} logit gradients for {} classes", d_logits.len(), self.classes)));
        }
        let (_, acts) = self.forward_acts(x.values());
        let dx = self.backprop(x.values(), &acts, d_logits, None);
        Grid3D::new(self.shape.height, self.shape.width, self.shape.channels, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_gradient, LossSpec};
    use approx::assert_abs_diff_eq;

    fn probe(shape: InputShape, seed: u64) -> Image {
        let mut rng = RngState::new(seed);
        let v = (0..shape.len()).map(|_| rng.uniform(0.0, 1.0)).collect();
        Grid3D::new(shape.height, shape.width, shape.channels, v).unwrap()
    }

    #[test]
    fn linear_forward_is_affine() {
        let shape = InputShape::new(1, 3, 1);
        let m = ToyModel::linear(shape, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5], vec![0.5, -0.5]).unwrap();
        let x = Grid3D::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let z = m.forward(&x).unwrap();
        assert_abs_diff_eq!(z.0[0], 0.1 + 0.4 + 0.9 + 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(z.0[1], -0.1 + 0.15 - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_model_has_zero_logits_and_gradient() {
        let shape = InputShape::new(6, 6, 2);
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 5 }, Architecture::Conv { filters: 3, kernel: 3 }] {
            let m = ToyModel::zeros(arch, shape, 4).unwrap();
            let x = probe(shape, 1);
            assert!(m.forward(&x).unwrap().0.iter().all(|&v| v == 0.0));
            let g = m.input_gradient(&x, 2, LossSpec::CrossEntropy).unwrap();
            assert!(g.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_cross_entropy_gradient_closed_form() {
        let shape = InputShape::new(2, 2, 1);
        let mut rng = RngState::new(5);
        let w: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let m = ToyModel::linear(shape, w.clone(), vec![0.1, 0.0, -0.2]).unwrap();
        let x = probe(shape, 9);
        let z = m.forward(&x).unwrap();
        let zmax = z.0.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.0.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let y = 1;
        let g = m.input_gradient(&x, y, LossSpec::CrossEntropy).unwrap();
        for cell in 0..4 {
            let expect: f64 = (0..3).map(|c| (e[c] / s - (c == y) as u8 as f64) * w[c * 4 + cell]).sum();
            assert_abs_diff_eq!(g.values()[cell], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = ToyModel::zeros(Architecture::Linear, InputShape::new(2, 2, 1), 2).unwrap();
        let x = Grid3D::zeros(2, 3, 1);
        assert!(m.forward(&x).is_err());
        assert!(m.input_gradient(&x, 0, LossSpec::Margin).is_err());
        assert!(m.backward(&Grid3D::zeros(2, 2, 1), &[1.0]).is_err());
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let shape = InputShape::new(6, 5, 2);
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 4 }, Architecture::Conv { filters: 2, kernel: 3 }] {
            let m = ToyModel::init(arch, shape, 3, &mut RngState::new(2)).unwrap();
            let x = probe(shape, 3);
            let mut grads: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
            m.forward_with_param_grads(x.values(), &mut grads, |z| {
                loss_gradient(&Logits(z.to_vec()), 1, LossSpec::CrossEntropy).unwrap()
            });
            for (pi, p) in m.params().iter().enumerate() {
                for idx in (0..p.data.len()).step_by(7) {
                    let mut plus = m.clone();
                    plus.params_mut()[pi].data[idx] += 1e-6;
                    let mut minus = m.clone();
                    minus.params_mut()[pi].data[idx] -= 1e-6;
                    let fd = (plus.loss(&x, 1, LossSpec::CrossEntropy).unwrap()
                        - minus.loss(&x, 1, LossSpec::CrossEntropy).unwrap())
                        / 2e-6;
                    assert_abs_diff_eq!(grads[pi][idx], fd, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn architecture_tags_parse() {
        assert_eq!("mlp:32".parse::<Architecture>().unwrap(), Architecture::Mlp { hidden: 32 });
        assert_eq!("conv:4x5".parse::<Architecture>().unwrap(), Architecture::Conv { filters: 4, kernel: 5 });
        assert_eq!("linear".parse::<Architecture>().unwrap(), Architecture::Linear);
        assert!("resnet".parse::<Architecture>().is_err());
    }
}
