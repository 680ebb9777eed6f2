//! Layer vocabulary used by the detector encoder and the caption decoder.
//!
//! Layers hold only [`ParamId`]s; their weights live in a [`ParamStore`]
//! under the layer's dotted path and are registered when the layer is built.

use rand::Rng;

use crate::autodiff::params::{uniform_init, ParamId, ParamStore};
use crate::autodiff::tape::{Mask, Tape, Var};
use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

fn check_cols<S: Scalar>(tape: &Tape<'_, S>, x: Var, d: usize, path: &str) -> Result<(), AutodiffError> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != d {
        return Err(AutodiffError::Shape {
            context: path.to_string(),
            expected: vec![shape.first().copied().unwrap_or(0), d],
            got: shape.to_vec(),
        });
    }
    Ok(())
}

/// Fully connected layer `y = x W + b`, `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    path: String,
    weight: ParamId,
    bias: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        path: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let weight = store.get_or_register(&format!("{path}.weight"), &[d_in, d_out], || {
            uniform_init(&[d_in, d_out], d_in, rng)
        })?;
        let bias = store.get_or_register(&format!("{path}.bias"), &[d_out], || Tensor::zeros(vec![d_out]))?;
        Ok(Self { path: path.to_string(), weight, bias, d_in, d_out })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, AutodiffError> {
        check_cols(tape, x, self.d_in, &self.path)?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }
}

/// Two linear layers with a ReLU between: `d_in -> hidden -> d_out`.
///
/// The position-wise FFN of the decoder is the shape-preserving case
/// `d_in == d_out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

pub type Ffn = Mlp;

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        path: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let fc1 = Linear::new(store, &format!("{path}.fc1"), d_in, hidden, rng)?;
        let fc2 = Linear::new(store, &format!("{path}.fc2"), hidden, d_out, rng)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, AutodiffError> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}

/// Residual sum followed by layer normalization: `LN(a + b)`.
#[derive(Clone, Debug)]
pub struct AddNorm {
    path: String,
    gain: ParamId,
    bias: ParamId,
    d: usize,
}

impl AddNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, path: &str, d: usize) -> Result<Self, AutodiffError> {
        let gain = store.get_or_register(&format!("{path}.gain"), &[d], || Tensor::full(vec![d], S::one()))?;
        let bias = store.get_or_register(&format!("{path}.bias"), &[d], || Tensor::zeros(vec![d]))?;
        Ok(Self { path: path.to_string(), gain, bias, d })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, a: Var, b: Var) -> Result<Var, AutodiffError> {
        check_cols(tape, a, self.d, &self.path)?;
        if tape.shape(a) != tape.shape(b) {
            return Err(AutodiffError::Shape {
                context: self.path.clone(),
                expected: tape.shape(a).to_vec(),
                got: tape.shape(b).to_vec(),
            });
        }
        let sum = tape.add(a, b)?;
        let g = tape.param(self.gain);
        let bias = tape.param(self.bias);
        tape.layer_norm(sum, g, bias)
    }
}

/// Keys and values after their input projections; reusable across queries.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedKv {
    pub keys: Var,
    pub values: Var,
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    path: String,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d: usize,
}

impl Attention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        path: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(AutodiffError::Heads { dim: d, heads });
        }
        Ok(Self {
            path: path.to_string(),
            wq: Linear::new(store, &format!("{path}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{path}.k"), d, d, rng)?,
            wv: Linear::new(store, &format!("{path}.v"), d, d, rng)?,
            wo: Linear::new(store, &format!("{path}.out"), d, d, rng)?,
            heads,
            d,
        })
    }

    pub fn project_kv<S: Scalar>(&self, tape: &mut Tape<'_, S>, k: Var, v: Var) -> Result<ProjectedKv, AutodiffError> {
        Ok(ProjectedKv { keys: self.wk.forward(tape, k)?, values: self.wv.forward(tape, v)? })
    }

    pub fn attend<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        q: Var,
        kv: ProjectedKv,
        mask: &Mask,
    ) -> Result<Var, AutodiffError> {
        check_cols(tape, q, self.d, &self.path)?;
        let qp = self.wq.forward(tape, q)?;
        let mixed = tape.attention(qp, kv.keys, kv.values, self.heads, mask).map_err(|e| match e {
            AutodiffError::DegenerateMask { row } => AutodiffError::DegenerateMaskAt { context: self.path.clone(), row },
            other => other,
        })?;
        self.wo.forward(tape, mixed)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        q: Var,
        k: Var,
        v: Var,
        mask: &Mask,
    ) -> Result<Var, AutodiffError> {
        let kv = self.project_kv(tape, k, v)?;
        self.attend(tape, q, kv, mask)
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Lookup table `[n, d]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    n: usize,
}

impl Embedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        path: &str,
        n: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let table = store.get_or_register(&format!("{path}.table"), &[n, d], || uniform_init(&[n, d], d, rng))?;
        Ok(Self { table, n })
    }

    pub fn lookup<S: Scalar>(&self, tape: &mut Tape<'_, S>, ids: &[usize]) -> Result<Var, AutodiffError> {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_param_gradients, probe_loss, GradCheck};
    use crate::autodiff::tape::Reduction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight_cases() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 2, 2, &mut rng()).unwrap();
        *store.value_mut(lin.weight()) = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut zero = ParamStore::<f64>::new();
        let z = Linear::new(&mut zero, "fc", 2, 1, &mut rng()).unwrap();
        *zero.value_mut(z.weight()) = Tensor::zeros(vec![2, 1]);
        *zero.value_mut(z.bias()) = Tensor::new(vec![1], vec![3.0]).unwrap();

        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = lin.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let mut tape = Tape::new(&zero);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![-7.0, 41.0]).unwrap());
        let y = z.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_shape_error_names_the_layer() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "layer0.gcm.obj_box_fc", 6, 4, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(vec![2, 5]));
        let err = lin.forward(&mut tape, x).unwrap_err();
        assert!(err.to_string().contains("layer0.gcm.obj_box_fc"), "{err}");
    }

    #[test]
    fn linear_weight_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 4, &mut rng()).unwrap();
        let x = input(5, 3, 2);
        let report = check_param_gradients(&store, &store.ids().collect::<Vec<_>>(), GradCheck::default(), |tape| {
            let xv = tape.constant(x.clone());
            let y = lin.forward(tape, xv)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn mlp_with_zero_weights_reduces_to_the_output_bias() {
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "mlp", 3, 8, 2, &mut rng()).unwrap();
        for (id, name, _) in store.iter().map(|(i, n, v)| (i, n.to_string(), v.clone())).collect::<Vec<_>>() {
            if name.ends_with("weight") {
                store.value_mut(id).scale_assign(0.0);
            }
        }
        let b2 = store.id("mlp.fc2.bias").unwrap();
        *store.value_mut(b2) = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(input(4, 3, 9));
        let y = mlp.forward(&mut tape, x).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn relu_maps_zero_to_zero() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, -2.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mlp_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "mlp", 3, 6, 3, &mut rng()).unwrap();
        let x = input(4, 3, 5);
        let w = input(4, 3, 6);
        let ids: Vec<_> = store.ids().collect();
        let report = check_param_gradients(&store, &ids, GradCheck::default(), |tape| {
            let xv = tape.constant(x.clone());
            let y = mlp.forward(tape, xv)?;
            let wv = tape.constant(w.clone());
            let yw = tape.add(y, wv)?;
            probe_loss(tape, yw, 3)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn add_norm_constant_row_gives_zero_and_is_commutative() {
        let mut store = ParamStore::<f64>::new();
        let an = AddNorm::new(&mut store, "norm", 4).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 4], vec![4.0, 3.0, 2.0, 1.0]).unwrap());
        let y = an.forward(&mut tape, a, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x1 = input(3, 4, 1);
        let x2 = input(3, 4, 2);
        let a = tape.constant(x1);
        let b = tape.constant(x2);
        let ab = an.forward(&mut tape, a, b).unwrap();
        let ba = an.forward(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
        for row in tape.value(ab).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn add_norm_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let an = AddNorm::new(&mut store, "norm", 5).unwrap();
        let g = store.id("norm.gain").unwrap();
        let gain: Vec<f64> = input(1, 5, 4).into_data().into_iter().map(|v| v + 1.5).collect();
        *store.value_mut(g) = Tensor::new(vec![5], gain).unwrap();
        let (x1, x2, w) = (input(3, 5, 7), input(3, 5, 8), input(3, 5, 9));
        let ids: Vec<_> = store.ids().collect();
        let report = check_param_gradients(&store, &ids, GradCheck::default(), |tape| {
            let a = tape.constant(x1.clone());
            let b = tape.constant(x2.clone());
            let y = an.forward(tape, a, b)?;
            let wv = tape.constant(w.clone());
            let yw = tape.add(y, wv)?;
            probe_loss(tape, yw, 4)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn attention_single_key_returns_the_value_row() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut store, "attn", 4, 2, &mut rng()).unwrap();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        for lin in attn.projections() {
            *store.value_mut(lin.weight()) = Tensor::new(vec![4, 4], eye.clone()).unwrap();
        }
        let mut tape = Tape::new(&store);
        let q = tape.constant(input(3, 4, 1));
        let k = tape.constant(input(1, 4, 2));
        let value_row = input(1, 4, 3);
        let v = tape.constant(value_row.clone());
        let y = attn.forward(&mut tape, q, k, v, &Mask::Full).unwrap();
        for row in tape.value(y).data().chunks(4) {
            for (a, b) in row.iter().zip(value_row.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_give_uniform_weights() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(input(2, 4, 1));
        let k = tape.constant(Tensor::new(vec![3, 4], [0.3, -0.2, 0.9, 0.1].repeat(3)).unwrap());
        let v = tape.constant(input(3, 4, 2));
        let y = tape.attention(q, k, v, 2, &Mask::Full).unwrap();
        for &p in tape.attention_weights(y).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_over_unmasked_keys() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(input(4, 8, 1));
        let k = tape.constant(input(5, 8, 2));
        let v = tape.constant(input(5, 8, 3));
        let mask = Mask::Keys(vec![true, false, true, true, false]);
        let y = tape.attention(q, k, v, 4, &mask).unwrap();
        for row in tape.attention_weights(y).unwrap().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(row[1], 0.0);
            assert_eq!(row[4], 0.0);
        }
    }

    #[test]
    fn fully_masked_row_is_a_degenerate_mask_error() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut store, "layer0.gcm.obj_attn", 4, 2, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let q = tape.constant(input(2, 4, 1));
        let k = tape.constant(input(3, 4, 2));
        let err = attn.forward(&mut tape, q, k, k, &Mask::Keys(vec![false; 3])).unwrap_err();
        assert!(matches!(err, AutodiffError::DegenerateMaskAt { .. }), "{err}");
        assert!(err.to_string().contains("layer0.gcm.obj_attn"));
    }

    #[test]
    fn attention_is_invariant_to_joint_key_value_permutation() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut store, "attn", 8, 4, &mut rng()).unwrap();
        let (q, k, v) = (input(3, 8, 1), input(6, 8, 2), input(6, 8, 3));
        let perm = [4, 2, 5, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let mut tape = Tape::new(&store);
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let base = attn.forward(&mut tape, qv, kv, vv, &Mask::Full).unwrap();
        let (kp, vp) = (tape.constant(permute(&k)), tape.constant(permute(&v)));
        let shuffled = attn.forward(&mut tape, qv, kp, vp, &Mask::Full).unwrap();
        assert!(tape.value(base).max_abs_diff(tape.value(shuffled)) <= 1e-9);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let uniform = tape.constant(Tensor::zeros(vec![3, 8]));
        let l = tape.cross_entropy(uniform, &[1, 7, 0], None, Reduction::Mean).unwrap();
        assert!((tape.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let mut confident = vec![0.0; 8];
        confident[5] = 20.0;
        let c = tape.constant(Tensor::new(vec![1, 8], confident).unwrap());
        let l = tape.cross_entropy(c, &[5], None, Reduction::Mean).unwrap();
        assert!(tape.value(l).item() < 1e-6);

        let err = tape.cross_entropy(c, &[8], None, Reduction::Mean).unwrap_err();
        assert!(matches!(err, AutodiffError::TargetOutOfRange { .. }));
    }

    #[test]
    fn backward_twice_is_a_tape_state_error() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(input(2, 3, 1));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.leaf(x).unwrap().data().iter().all(|&g| g == 1.0));
        assert!(matches!(tape.backward(s), Err(AutodiffError::TapeConsumed)));
        tape.reset();
        let x = tape.input(input(2, 3, 1));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_ok());
    }
}
