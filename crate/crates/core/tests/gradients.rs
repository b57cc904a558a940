use shadowalign_core::nn::{backprop, loss_from_trace, ArchSpec, DropoutMode, Model, Upstream};
use shadowalign_core::train::init_weights;
use shadowalign_core::{Stream, Tensor};

const EPS: f64 = 1e-3;

fn random_input(shape: &[usize], rng: &mut Stream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

type Signature = (Vec<Option<Vec<usize>>>, Vec<Option<Vec<bool>>>, Vec<Vec<bool>>);

fn loss_at(m: &Model<f64>, x: &Tensor<f64>, y: usize, mask_seed: u64) -> (f64, Signature) {
    let mut s = Stream::new(mask_seed);
    let t = m.forward(x, DropoutMode::Masked(&mut s)).unwrap();
    (loss_from_trace(&t, y), t.routing_signature())
}

/// Worst relative error between backprop and central differences, with
/// denominators floored at 1e-2 so near-zero entries are compared absolutely.
/// Entries whose perturbation flips a ReLU, max-pool choice or mask are
/// skipped and counted: the loss is not differentiable across them.
fn worst_error(m: &Model<f64>, x: &Tensor<f64>, y: usize, mask_seed: u64) -> (f64, usize, usize) {
    let mut s = Stream::new(mask_seed);
    let trace = m.forward(x, DropoutMode::Masked(&mut s)).unwrap();
    let mut g = shadowalign_core::nn::probabilities(&trace);
    g[y] -= 1.0;
    let (grads, _) = backprop(m, &trace, Upstream::Logits(g), false).unwrap();
    let base = trace.routing_signature();
    let (mut worst, mut skipped, mut total) = (0.0f64, 0, 0);
    for l in 0..m.depth() {
        for bias in [false, true] {
            let len = if bias { m.param(l).bias.len() } else { m.param(l).weight.len() };
            for i in 0..len {
                let bump = |d: f64| {
                    let mut p = m.clone();
                    let t = if bias { &mut p.param_mut(l).bias } else { &mut p.param_mut(l).weight };
                    t.data_mut()[i] += d;
                    loss_at(&p, x, y, mask_seed)
                };
                let (up, sig_up) = bump(EPS);
                let (down, sig_down) = bump(-EPS);
                total += 1;
                if sig_up != base || sig_down != base {
                    skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * EPS);
                let g = &grads.layers[l];
                let analytic = if bias { g.bias.data()[i] } else { g.weight.data()[i] };
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
    }
    (worst, skipped, total)
}

fn check(arch: &str, cases: u64) {
    let spec = ArchSpec::parse(arch).unwrap();
    let (mut skipped, mut total) = (0, 0);
    for case in 0..cases {
        let m: Model<f64> = init_weights(&spec, 100 + case).unwrap();
        let mut rng = Stream::new(case);
        let x = random_input(&spec.input_shape, &mut rng);
        let y = rng.below(m.num_classes() as u64) as usize;
        let (err, s, t) = worst_error(&m, &x, y, 7 + case);
        assert!(err < 1e-4, "{arch}: case {case}, relative error {err:e}");
        skipped += s;
        total += t;
    }
    assert!(skipped * 20 < total, "{arch}: {skipped} of {total} entries cross a kink");
}

#[test]
fn dense_layers() {
    check("input 4\ndense 3 tanh\ndense 2 softmax", 30);
    check("input 6\ndense 5 sigmoid\ndense 4 relu\ndense 3 softmax", 20);
}

#[test]
fn conv_layers() {
    check("input 2x5x5\nconv2d 3 k=3x3 pad=1 tanh\nflatten\ndense 3 softmax", 15);
    check("input 1x6x6\nconv2d 2 k=3x2 stride=2 relu\nflatten\ndense 2 softmax", 15);
}

#[test]
fn pooling_layers() {
    check("input 1x6x6\nconv2d 2 k=3x3 pad=1 relu\nmaxpool 2\nflatten\ndense 3 softmax", 15);
}

#[test]
fn dropout_layers() {
    check("input 5\ndense 8 relu\ndropout 0.3\ndense 3 softmax", 15);
    check("input 1x5x5\nconv2d 2 k=3x3 tanh\nflatten\ndropout 0.5\ndense 2 softmax", 10);
}
