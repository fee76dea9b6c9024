use super::{Rng, Tape, Tensor, Var};
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Maximum relative error between tape gradients and central differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `point`. Every
/// coordinate of every input is perturbed by `±h`; the error of a coordinate
/// is `|autodiff − fd| / max(|autodiff|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..point[i].numel() {
            let orig = point[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic.data()[j];
            worst = worst.max((ad - fd).abs() / ad.abs().max(1e-8));
        }
    }
    Ok(worst)
}

/// Standard-normal tensor of `shape`.
pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("non-empty shape")
}

type Probe = fn(&mut Tape<f64>, &[Var], &Tensor<f64>) -> Result<Var>;

/// Reduces a tensor output to a scalar with fixed random weights, so that
/// every output coordinate contributes a distinct gradient.
fn contract(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(out).numel();
    let w = Tensor::new(tape.shape(out).to_vec(), weights.data()[..n].to_vec())?;
    let w = tape.constant(w);
    let y = tape.mul(out, w)?;
    Ok(tape.sum(y))
}

/// `(name, input shapes, probe)` for every differentiable primitive.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Probe)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v, w| {
            let y = t.matmul(v[0], v[1])?;
            contract(t, y, w)
        }),
        ("matmul_t", vec![vec![2, 4, 3], vec![2, 5, 4]], |t, v, w| {
            let y = t.matmul_t(v[0], v[1], true, true)?;
            contract(t, y, w)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v, w| {
            let y = t.add(v[0], v[1])?;
            contract(t, y, w)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v, w| {
            let y = t.sub(v[0], v[1])?;
            contract(t, y, w)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v, w| {
            let y = t.mul(v[0], v[1])?;
            contract(t, y, w)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v, w| {
            let y = t.add_bias(v[0], v[1])?;
            contract(t, y, w)
        }),
        ("scale", vec![vec![2, 3]], |t, v, w| {
            let y = t.scale(v[0], -1.7);
            contract(t, y, w)
        }),
        ("scale_by", vec![vec![2, 3], vec![1]], |t, v, w| {
            let y = t.scale_by(v[0], v[1])?;
            contract(t, y, w)
        }),
        ("transpose", vec![vec![2, 3]], |t, v, w| {
            let y = t.transpose(v[0])?;
            contract(t, y, w)
        }),
        ("reshape", vec![vec![2, 6]], |t, v, w| {
            let y = t.reshape(v[0], &[3, 4])?;
            contract(t, y, w)
        }),
        ("permute", vec![vec![2, 3, 2, 2]], |t, v, w| {
            let y = t.permute(v[0], &[0, 2, 1, 3])?;
            contract(t, y, w)
        }),
        ("slice", vec![vec![3, 5]], |t, v, w| {
            let y = t.slice(v[0], 1, 1, 4)?;
            contract(t, y, w)
        }),
        ("concat", vec![vec![2, 2, 3], vec![2, 1, 3]], |t, v, w| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            contract(t, y, w)
        }),
        ("repeat", vec![vec![2, 3]], |t, v, w| {
            let y = t.repeat(v[0], 3)?;
            contract(t, y, w)
        }),
        ("softmax", vec![vec![3, 4]], |t, v, w| {
            let y = t.softmax(v[0]);
            contract(t, y, w)
        }),
        ("log_softmax", vec![vec![3, 4]], |t, v, w| {
            let y = t.log_softmax(v[0]);
            contract(t, y, w)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v, w| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            contract(t, y, w)
        }),
        ("gelu", vec![vec![3, 4]], |t, v, w| {
            let y = t.gelu(v[0]);
            contract(t, y, w)
        }),
        ("exp", vec![vec![3, 4]], |t, v, w| {
            let y = t.exp(v[0]);
            contract(t, y, w)
        }),
        ("l2_normalize", vec![vec![3, 4]], |t, v, w| {
            let y = t.l2_normalize(v[0]);
            contract(t, y, w)
        }),
        ("mean", vec![vec![3, 4]], |t, v, _| Ok(t.mean(v[0]))),
        ("sum", vec![vec![3, 4]], |t, v, _| Ok(t.sum(v[0]))),
        ("sum_squares", vec![vec![3, 4]], |t, v, _| Ok(t.sum_squares(v[0]))),
        ("embedding", vec![vec![5, 3]], |t, v, w| {
            let y = t.embedding(v[0], &[4, 0, 4, 2])?;
            contract(t, y, w)
        }),
    ]
}

/// Worst relative gradient error of every primitive over `points` random
/// 64-bit points.
pub fn primitive_suite(seed: u64, points: usize) -> Result<Vec<(&'static str, f64)>> {
    let root = Rng::new(seed);
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, probe)| {
            let mut rng = root.fork(name);
            let mut worst = 0.0f64;
            for _ in 0..points {
                let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
                let weights = random_tensor(&mut rng, &[64]);
                let err = grad_check(|t, v| probe(t, v, &weights), &inputs, FD_STEP)?;
                worst = worst.max(err);
            }
            Ok((name, worst))
        })
        .collect()
}
