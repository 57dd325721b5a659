use gridpoint_net::arch::ArchSpec;
use gridpoint_net::loss::{weighted_bce, weighted_bce_grad};
use gridpoint_net::model::{backward, build_model, forward_logits, Mode, ParamSet};
use gridpoint_net::ops::Act;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

const POS_WEIGHT: f64 = 4.0;

fn tiny() -> ArchSpec {
    ArchSpec::with_widths([2, 2, 2], 4)
}

fn sample() -> (Act<f64>, Array2<f64>) {
    let n = 2;
    let x = Array2::from_shape_fn((1, n * 64), |(_, j)| (((j * 37 + 11) % 23) as f64) / 23.0);
    let y = Array2::from_shape_fn((1, n * 64), |(_, j)| if (j % 8 == 3) || (j / 8) % 8 == 5 { 1.0 } else { 0.0 });
    (Act::new(x, n, 8, 8), y)
}

fn loss(p: &ParamSet<f64>, x: &Act<f64>, y: &Array2<f64>, dropout_seed: u64) -> f64 {
    let mut rng: ChaCha8Rng = gridpoint_core::seed::rng(dropout_seed);
    let (z, _) = forward_logits(p, x.clone(), Mode::Train(&mut rng), false).unwrap();
    weighted_bce(&z.data, y, POS_WEIGHT)
}

fn check(spec: ArchSpec, dropout_seed: u64) {
    let mut p: ParamSet<f64> = build_model(&spec, 17).unwrap();
    // Zero biases put dead units exactly on the ReLU kink, where the
    // central difference is not a derivative.
    for (i, l) in p.layers.iter_mut().enumerate() {
        for (j, b) in l.b.iter_mut().enumerate() {
            *b = 0.05 * (((i * 7 + j * 3) % 5) as f64 - 2.0) + 0.013;
        }
    }
    let (x, y) = sample();
    let mut rng: ChaCha8Rng = gridpoint_core::seed::rng(dropout_seed);
    let (z, cache) = forward_logits(&p, x.clone(), Mode::Train(&mut rng), true).unwrap();
    let (_, dz) = weighted_bce_grad(&z.data, &y, POS_WEIGHT);
    let g = backward(&p, &cache.unwrap(), &dz);

    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    for (li, layer) in p.layers.iter().enumerate() {
        let n_w = layer.w.len();
        for k in 0..n_w + layer.b.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let analytic = if k < n_w {
                let idx = (k / layer.w.ncols(), k % layer.w.ncols());
                plus.layers[li].w[idx] += h;
                minus.layers[li].w[idx] -= h;
                g.layers[li].w[idx]
            } else {
                plus.layers[li].b[k - n_w] += h;
                minus.layers[li].b[k - n_w] -= h;
                g.layers[li].b[k - n_w]
            };
            let numeric = (loss(&plus, &x, &y, dropout_seed) - loss(&minus, &x, &y, dropout_seed)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (analytic - numeric).abs() / scale };
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}]: analytic {analytic:e}, numeric {numeric:e}", layer.name));
            }
        }
    }
    assert!(worst.0 <= 1e-3, "max relative error {:e} at {}", worst.0, worst.1);
}

#[test]
fn gradients_match_central_differences() {
    let mut spec = tiny();
    spec.dropout_enc3 = 0.0;
    spec.dropout_bottleneck = 0.0;
    check(spec, 1);
}

#[test]
fn gradients_match_with_dropout_masks() {
    check(tiny(), 99);
}
