//! Learned vector fields: a GELU multilayer perceptron and its
//! unconstrained, stabilized and projected wrappers.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gelu, Matrix};
use crate::manifold::{project_tangent, record_projection, record_stabilization, stabilization_term, ConstraintSet};
use crate::tape::{NodeId, Tape};

const MAGIC: &[u8; 8] = b"PNDECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Feed-forward network with GELU on hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows() {
                return Err(shape_err("layer bias", l.weights.rows(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].weights.rows() != l.weights.cols() {
                return Err(shape_err("layer chain", layers[i - 1].weights.rows(), l.weights.cols()));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform weights in `±1/√fan_in`, zero biases. `widths` lists every
    /// layer width from input to output.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weights: Matrix::from_raw(w[1], w[0], data),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Self::new(
            widths
                .windows(2)
                .map(|w| Layer {
                    weights: Matrix::zeros(w[1], w[0]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter blocks in the order weights₀, bias₀, weights₁, …
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.input_dim() {
            return Err(shape_err("mlp input", self.input_dim(), u.len()));
        }
        let mut x = u.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.weights.matvec(&x)?;
            for (yi, bi) in y.iter_mut().zip(&l.bias) {
                *yi += bi;
            }
            if i < last {
                y.iter_mut().for_each(|v| *v = gelu(*v));
            }
            x = y;
        }
        Ok(x)
    }

    /// Register every parameter block as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weights.clone()), tape.leaf(Matrix::column(l.bias.clone()))))
                .collect(),
        }
    }

    /// Register the parameters as constants, for rollouts that need no
    /// parameter gradient.
    pub fn constants(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.constant(l.weights.clone()),
                        tape.constant(Matrix::column(l.bias.clone())),
                    )
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.param_count() + 8 * self.layers.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weights.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weights.cols() as u32).to_le_bytes());
            for x in l.weights.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let weights = r.f64s(rows * cols)?;
            let bias = r.f64s(rows)?;
            let weights = Matrix::new(rows, cols, weights).map_err(|e| Error::Format(e.to_string()))?;
            layers.push(Layer { weights, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(layers).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load a checkpoint whose input and output width must be `dim`.
    pub fn load_for_dim(path: &Path, dim: usize) -> Result<Self> {
        let p = Self::load(path)?;
        p.check_dim(dim)?;
        Ok(p)
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.input_dim() != dim || self.output_dim() != dim {
            return Err(Error::Config(format!(
                "network maps width {} to {}, but the system has width {dim}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("layer too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Tape nodes of every `(weights, bias)` pair.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Nodes in the order of [`MlpParams::blocks`].
    pub fn blocks(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, u: NodeId) -> Result<NodeId> {
        let mut x = u;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = tape.affine(w, b, x)?;
            if i < last {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldKind {
    Nde,
    Snde { gamma: f64 },
    Pnde,
}

impl FieldKind {
    pub fn label(&self) -> String {
        match self {
            FieldKind::Nde => "NDE".into(),
            FieldKind::Snde { gamma } => format!("SNDE(gamma={gamma})"),
            FieldKind::Pnde => "PNDE".into(),
        }
    }

    pub fn needs_constraints(&self) -> bool {
        !matches!(self, FieldKind::Nde)
    }
}

/// A network together with the way its output is turned into a vector field.
#[derive(Clone, Debug)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub params: Arc<MlpParams>,
    pub constraints: Option<Arc<dyn ConstraintSet>>,
}

impl FieldSpec {
    pub fn new(kind: FieldKind, params: Arc<MlpParams>, constraints: Option<Arc<dyn ConstraintSet>>) -> Result<Self> {
        if params.input_dim() != params.output_dim() {
            return Err(Error::Config(format!(
                "vector field must map a space to itself, got {} -> {}",
                params.input_dim(),
                params.output_dim()
            )));
        }
        if let FieldKind::Snde { gamma } = kind {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("gamma must be finite and non-negative, got {gamma}")));
            }
        }
        if kind.needs_constraints() {
            let Some(c) = &constraints else {
                return Err(Error::Config(format!("{} needs a constraint set", kind.label())));
            };
            params.check_dim(c.ambient_dim())?;
        }
        Ok(Self {
            kind,
            params,
            constraints,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.input_dim()
    }

    fn constraint_set(&self) -> &Arc<dyn ConstraintSet> {
        self.constraints.as_ref().expect("checked in FieldSpec::new")
    }

    pub fn eval(&self, u: &[f64]) -> Result<Vec<f64>> {
        let f = self.params.forward(u)?;
        match self.kind {
            FieldKind::Nde | FieldKind::Snde { gamma: 0.0 } => Ok(f),
            FieldKind::Snde { gamma } => {
                let s = stabilization_term(self.constraint_set().as_ref(), u, gamma)?;
                Ok(f.iter().zip(&s).map(|(a, b)| a + b).collect())
            }
            FieldKind::Pnde => project_tangent(self.constraint_set().as_ref(), u, &f),
        }
    }

    /// Record the field at `u` using parameter nodes `p`.
    pub fn record(&self, tape: &mut Tape, p: &ParamNodes, u: NodeId) -> Result<NodeId> {
        let f = p.forward(tape, u)?;
        match self.kind {
            FieldKind::Nde | FieldKind::Snde { gamma: 0.0 } => Ok(f),
            FieldKind::Snde { gamma } => {
                let s = record_stabilization(tape, self.constraint_set(), u, gamma)?;
                tape.add(f, s)
            }
            FieldKind::Pnde => record_projection(tape, self.constraint_set(), u, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_inf;
    use crate::manifold::{newton_retract, Sphere};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_examples() {
        let z = MlpParams::zeros(&[3, 5, 3]).unwrap();
        assert_eq!(z.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);

        let id = MlpParams::new(vec![Layer {
            weights: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        assert_eq!(id.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(id.forward(&[1.0]).is_err());
    }

    #[test]
    fn forward_matches_independent_implementation() {
        let w1 = [[0.1, -0.2], [0.3, 0.05], [-0.4, 0.25]];
        let b1 = [0.01, -0.02, 0.03];
        let w2 = [[0.2, -0.1, 0.15], [0.05, 0.3, -0.25]];
        let b2 = [0.04, -0.05];
        let p = MlpParams::new(vec![
            Layer {
                weights: Matrix::from_rows(&[&w1[0], &w1[1], &w1[2]]).unwrap(),
                bias: b1.to_vec(),
            },
            Layer {
                weights: Matrix::from_rows(&[&w2[0], &w2[1]]).unwrap(),
                bias: b2.to_vec(),
            },
        ])
        .unwrap();
        let u = [0.7, -1.3];
        let act = |x: f64| 0.5 * x * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()));
        let h: Vec<f64> = (0..3).map(|i| act(w1[i][0] * u[0] + w1[i][1] * u[1] + b1[i])).collect();
        let expected: Vec<f64> = (0..2)
            .map(|i| w2[i][0] * h[0] + w2[i][1] * h[1] + w2[i][2] * h[2] + b2[i])
            .collect();
        let out = p.forward(&u).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::init(&[4, 16, 16, 4], &mut rng).unwrap();
        let u = rand_vec(&mut rng, 4);
        let mut tape = Tape::new();
        let nodes = p.leaves(&mut tape);
        let x = tape.constant_vec(u.clone());
        let y = nodes.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).as_slice(), p.forward(&u).unwrap().as_slice());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::init(&[16, 64, 16], &mut rng).unwrap();
        assert!(p.layers()[0].weights.as_slice().iter().all(|w| w.abs() <= 0.25));
        assert!(p.layers()[1].weights.as_slice().iter().all(|w| w.abs() <= 0.125));
        assert_eq!(p.param_count(), 16 * 64 + 64 + 64 * 16 + 16);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&[4, 8, 4], &mut rng).unwrap();
        let bytes = p.to_bytes();
        let q = MlpParams::from_bytes(&bytes).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.to_bytes(), bytes);

        assert!(matches!(MlpParams::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(MlpParams::from_bytes(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MlpParams::from_bytes(&bad), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        assert_eq!(MlpParams::load_for_dim(&path, 4).unwrap(), p);
        match MlpParams::load_for_dim(&path, 6) {
            Err(Error::Config(msg)) => assert!(msg.contains('4') && msg.contains('6'), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    fn sphere() -> Arc<dyn ConstraintSet> {
        Arc::new(Sphere::unit(3))
    }

    #[test]
    fn field_kinds_need_constraints() {
        let p = Arc::new(MlpParams::zeros(&[3, 4, 3]).unwrap());
        assert!(FieldSpec::new(FieldKind::Pnde, p.clone(), None).is_err());
        assert!(FieldSpec::new(FieldKind::Snde { gamma: -1.0 }, p.clone(), Some(sphere())).is_err());
        assert!(FieldSpec::new(FieldKind::Nde, p.clone(), None).is_ok());
        let wide: Arc<dyn ConstraintSet> = Arc::new(Sphere::unit(5));
        assert!(matches!(FieldSpec::new(FieldKind::Pnde, p, Some(wide)), Err(Error::Config(_))));
    }

    #[test]
    fn pnde_output_is_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Arc::new(MlpParams::init(&[3, 16, 3], &mut rng).unwrap());
        let f = FieldSpec::new(FieldKind::Pnde, p, Some(sphere())).unwrap();
        let c = sphere();
        for _ in 0..50 {
            let u = newton_retract(c.as_ref(), &rand_vec(&mut rng, 3), 1e-14, 50).unwrap();
            let v = f.eval(&u).unwrap();
            let dg = c.jacobian(&u).matvec(&v).unwrap();
            assert!(norm_inf(&dg) <= 1e-10);
        }
    }

    #[test]
    fn snde_on_manifold_equals_nde() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Arc::new(MlpParams::init(&[3, 16, 3], &mut rng).unwrap());
        let nde = FieldSpec::new(FieldKind::Nde, p.clone(), None).unwrap();
        let snde = FieldSpec::new(FieldKind::Snde { gamma: 3.0 }, p.clone(), Some(sphere())).unwrap();
        let zero = FieldSpec::new(FieldKind::Snde { gamma: 0.0 }, p, Some(sphere())).unwrap();
        let u = [0.6, 0.0, 0.8];
        assert_eq!(sphere().residual(&u), vec![0.0]);
        assert_eq!(snde.eval(&u).unwrap(), nde.eval(&u).unwrap());
        let off = [1.3, -0.2, 0.4];
        assert_eq!(zero.eval(&off).unwrap(), nde.eval(&off).unwrap());
    }

    #[test]
    fn snde_sphere_example() {
        let c: Arc<dyn ConstraintSet> = Arc::new(Sphere::unit(2));
        let p = Arc::new(MlpParams::zeros(&[2, 2]).unwrap());
        let f = FieldSpec::new(FieldKind::Snde { gamma: 1.0 }, p, Some(c)).unwrap();
        // F(u) g(u) = 2u/(4‖u‖²)·3 at u = (2, 0).
        let out = f.eval(&[2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(out[0], -0.75, epsilon = 1e-15);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn every_kind_has_exact_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MlpParams::init(&[3, 8, 3], &mut rng).unwrap();
        let u = [0.9, -0.5, 0.4];
        let t = [0.3, -0.1, 0.7];
        let sizes: Vec<usize> = p.blocks().iter().map(|b| b.len()).collect();
        let coords: Vec<(usize, usize)> = (0..20)
            .map(|_| {
                let b = rng.random_range(0..sizes.len());
                (b, rng.random_range(0..sizes[b]))
            })
            .collect();
        for kind in [FieldKind::Nde, FieldKind::Snde { gamma: 2.0 }, FieldKind::Pnde] {
            let objective = |q: MlpParams| {
                let f = FieldSpec::new(kind, Arc::new(q), Some(sphere())).unwrap();
                f.eval(&u).unwrap().iter().zip(&t).map(|(a, b)| a * b).sum::<f64>()
            };
            let spec = FieldSpec::new(kind, Arc::new(p.clone()), Some(sphere())).unwrap();
            let mut tape = Tape::new();
            let nodes = p.leaves(&mut tape);
            let un = tape.constant_vec(u.to_vec());
            let out = spec.record(&mut tape, &nodes, un).unwrap();
            let tn = tape.constant_vec(t.to_vec());
            let loss = tape.dot(out, tn).unwrap();
            let grads = tape.backward(loss).unwrap();
            let blocks = nodes.blocks();
            for &(b, i) in &coords {
                let h = 1e-6;
                let mut plus = p.clone();
                plus.blocks_mut()[b][i] += h;
                let mut minus = p.clone();
                minus.blocks_mut()[b][i] -= h;
                let fd = (objective(plus) - objective(minus)) / (2.0 * h);
                let g = grads.wrt(blocks[b]).as_slice()[i];
                assert!((g - fd).abs() <= 1e-5 * (fd.abs() + 1e-12), "{kind:?} block {b} entry {i}: {g} vs {fd}");
            }
        }
    }
}
