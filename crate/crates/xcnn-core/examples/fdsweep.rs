use rand::seq::SliceRandom;
use rand::Rng;

use xcnn_core::nn::{ArchitectureSpec, LayerSpec};
use xcnn_core::rng;
use xcnn_core::tensor::check::gradient_check_many;
use xcnn_core::tensor::{Element, GradTape, NodeId, Tensor, TensorError};

fn spaced<E: Element>(shape: Vec<usize>, lo: f64, hi: f64, r: &mut impl Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|j| lo + (hi - lo) * (2.0 * j as f64 + 1.0) / (2.0 * n as f64))
        .collect();
    vals.shuffle(r);
    Tensor::new(shape, vals.into_iter().map(E::from_f64).collect()).unwrap()
}

/// Per-channel shuffled even grid over [-1, 1]: every channel's sample
/// standard deviation is the full grid's (≈ 0.576), so 1/sigma^3 stays tame.
fn spaced_per_channel<E: Element>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    spread: f64,
    r: &mut impl Rng,
) -> Tensor<E> {
    let per = n * h * w;
    let mut data = vec![E::ZERO; n * c * h * w];
    for ch in 0..c {
        let mut vals: Vec<f64> = (0..per)
            .map(|j| spread * (-1.0 + (2.0 * j as f64 + 1.0) / per as f64))
            .collect();
        vals.shuffle(r);
        let mut k = 0;
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    data[((ni * c + ch) * h + y) * w + x] = E::from_f64(vals[k]);
                    k += 1;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

fn conv_small<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[31]);
    let x = Tensor::<E>::uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = Tensor::<E>::uniform(vec![2, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::<E>::uniform(vec![2], -0.1, 0.1, &mut r);
    gradient_check_many(
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, w, b],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn bn_spaced<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[33]);
    let x = spaced_per_channel::<E>(2, 2, 3, 3, 3.0, &mut r);
    let g = Tensor::<E>::uniform(vec![2], 0.2, 0.4, &mut r);
    let bt = Tensor::<E>::uniform(vec![2], -0.1, 0.1, &mut r);
    // A plain sum is constant in x after train-mode normalization, so weight
    // the outputs by a fixed spread tensor to give x a real gradient. Linear
    // in y keeps the finite-difference truncation through the sigma chain
    // negligible, and near-zero-mean weights keep the loss value (and hence
    // its storage rounding) small next to the gradients.
    let c = spaced::<E>(vec![2, 2, 3, 3], -0.4, 0.6, &mut r);
    gradient_check_many(
        |t, ids| {
            let y = t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?.node;
            let cw = t.leaf(c.clone());
            let weighted = t.mul(y, cw)?;
            Ok(t.sum_all(weighted))
        },
        &[x, g, bt],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn pool_small<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[35]);
    let x = spaced::<E>(vec![1, 1, 4, 4], 0.5, 2.5, &mut r);
    gradient_check_many(
        |t, ids| {
            let y = t.maxpool2x2(ids[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn softmax_small<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[36]);
    let x = Tensor::<E>::uniform(vec![2, 3], -1.0, 1.0, &mut r);
    // A spread weighting keeps the probability gradients above the check
    // floor; the gradient of a bare sum of probabilities is identically zero.
    // Centering the weights at zero keeps the loss value small, so rounding
    // the scalar result costs little relative to the gradients.
    let c = spaced::<E>(vec![2, 3], -2.0, 2.0, &mut r);
    gradient_check_many(
        |t, ids| {
            let y = t.softmax(ids[0])?;
            let cw = t.leaf(c.clone());
            let weighted = t.mul(y, cw)?;
            Ok(t.sum_all(weighted))
        },
        &[x],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn ce_small<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[37]);
    let z = Tensor::<E>::uniform(vec![2, 3], -1.5, 1.5, &mut r);
    let weights = [E::from_f64(1.0), E::from_f64(2.5), E::from_f64(0.5)];
    gradient_check_many(
        |t, ids| t.weighted_cross_entropy(ids[0], &[1, 0], &weights),
        &[z],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn spec_loss<E: Element>(
    spec: &ArchitectureSpec,
    tape: &mut GradTape<E>,
    ids: &[NodeId],
    labels: &[usize],
    weights: &[E],
) -> Result<NodeId, TensorError> {
    let mut it = ids.iter().copied();
    let mut per_layer: Vec<Option<(NodeId, NodeId)>> = Vec::new();
    for layer in &spec.layers {
        per_layer.push(match layer {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } | LayerSpec::BatchNorm2d { .. } => {
                Some((it.next().unwrap(), it.next().unwrap()))
            }
            _ => None,
        });
    }
    let input = it.next().unwrap();
    let batch = tape.value(input).shape()[0];
    let mut x = input;
    for (idx, layer) in spec.layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let (w, b) = per_layer[idx].unwrap();
                tape.conv2d(x, w, b, stride, padding)?
            }
            LayerSpec::Linear { .. } => {
                let (w, b) = per_layer[idx].unwrap();
                tape.linear(x, w, b)?
            }
            LayerSpec::BatchNorm2d { eps, .. } => {
                let (g, bt) = per_layer[idx].unwrap();
                tape.batchnorm_train(x, g, bt, eps)?.node
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::MaxPool2x2 => tape.maxpool2x2(x)?,
            LayerSpec::Flatten => {
                let numel = tape.value(x).numel();
                tape.reshape(x, vec![batch, numel / batch])?
            }
            LayerSpec::Dropout { rate } => tape.dropout(x, rate, 99)?,
            LayerSpec::Softmax => tape.softmax(x)?,
        };
    }
    tape.weighted_cross_entropy(x, labels, weights)
}

fn full_32<E: Element>(seed: u64, step: f64) -> f64 {
    let spec = ArchitectureSpec::custom_cnn_for((32, 32), 3, 8).unwrap();
    let model = xcnn_core::nn::Model::<E>::new(spec.clone(), seed).unwrap();
    let mut r = rng::rng(seed, &[40]);
    let batch = Tensor::<E>::uniform(vec![4, 3, 32, 32], 0.1, 0.9, &mut r);
    let labels = [0usize, 1, 2, 0];
    let weights = [E::from_f64(1.25), E::from_f64(0.75), E::from_f64(1.0)];

    let mut params: Vec<Tensor<E>> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    params.push(batch);
    gradient_check_many(
        |tape, ids| spec_loss(&spec, tape, ids, &labels, &weights),
        &params,
        step,
        Some(12),
        seed,
    )
    .unwrap()
}

type Check = fn(u64, f64) -> f64;

fn sweep32(name: &str, check: Check, steps: &[f64], seeds: u64) {
    print!("{name:<12} f32:");
    for &s in steps {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(check(seed, s));
        }
        print!("  {s:.0e}->{worst:.1e}");
    }
    println!();
}

fn sweep64(name: &str, check: Check, steps: &[f64]) {
    print!("{name:<12} f64:");
    for &s in steps {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            worst = worst.max(check(seed, s));
        }
        print!("  {s:.0e}->{worst:.1e}");
    }
    println!();
}

fn linear_small<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[32]);
    let x = Tensor::<E>::uniform(vec![2, 6], -1.0, 1.0, &mut r);
    let w = Tensor::<E>::uniform(vec![4, 6], -0.5, 0.5, &mut r);
    let b = Tensor::<E>::uniform(vec![4], -0.1, 0.1, &mut r);
    gradient_check_many(
        |t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, w, b],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn relu_away<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[34]);
    let mut x = Tensor::<E>::uniform(vec![2, 3, 4, 4], 0.3, 1.3, &mut r);
    for v in x.data_mut().iter_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    gradient_check_many(
        |t, ids| {
            let y = t.relu(ids[0]);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn dropout_small<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[38]);
    let x = Tensor::<E>::uniform(vec![2, 8], 0.5, 1.5, &mut r);
    gradient_check_many(
        |t, ids| {
            let y = t.dropout(ids[0], 0.4, 7)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn algebra_chain<E: Element>(seed: u64, step: f64) -> f64 {
    let mut r = rng::rng(seed, &[39]);
    let a = Tensor::<E>::uniform(vec![3, 3], 0.5, 1.5, &mut r);
    let b = Tensor::<E>::uniform(vec![3, 3], 0.5, 1.5, &mut r);
    gradient_check_many(
        |t, ids| {
            let la = t.log(ids[0])?;
            let ea = t.exp(la);
            let m = t.matmul(ea, ids[1])?;
            let s = t.add(m, ids[0])?;
            let d = t.sub(s, ids[1])?;
            let flat = t.reshape(d, vec![1, 9])?;
            let sq = t.mul(flat, flat)?;
            Ok(t.sum_all(sq))
        },
        &[a, b],
        step,
        None,
        seed,
    )
    .unwrap()
}

fn full_8<E: Element>(seed: u64, step: f64) -> f64 {
    let spec = ArchitectureSpec::custom_cnn_for((8, 8), 2, 3).unwrap();
    let model = xcnn_core::nn::Model::<E>::new(spec.clone(), seed).unwrap();
    let mut r = rng::rng(seed, &[41]);
    let batch = Tensor::<E>::uniform(vec![2, 3, 8, 8], 0.1, 0.9, &mut r);
    let labels = [0usize, 1];
    let weights = [E::from_f64(1.25), E::from_f64(0.75)];
    let mut params: Vec<Tensor<E>> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    params.push(batch);
    gradient_check_many(
        |tape, ids| spec_loss(&spec, tape, ids, &labels, &weights),
        &params,
        step,
        Some(12),
        seed,
    )
    .unwrap()
}

/// Worst relative disagreement between f32 analytic gradients and f64
/// analytic gradients computed from bit-identical inputs, over every
/// component of every parameter plus the batch. Floored like the f32 check.
fn full32_xprec(seed: u64) -> f64 {
    let spec = ArchitectureSpec::custom_cnn_for((32, 32), 3, 8).unwrap();
    let model = xcnn_core::nn::Model::<f32>::new(spec.clone(), seed).unwrap();
    let mut r = rng::rng(seed, &[40]);
    let batch = Tensor::<f32>::uniform(vec![4, 3, 32, 32], 0.1, 0.9, &mut r);
    let labels = [0usize, 1, 2, 0];

    let mut params: Vec<Tensor<f32>> =
        model.params().into_iter().map(|(_, t)| t.clone()).collect();
    params.push(batch);

    let grads_f32: Vec<Vec<f64>> = {
        let weights = [1.25f32, 0.75, 1.0];
        let mut tape = GradTape::<f32>::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad(true)))
            .collect();
        let root = spec_loss(&spec, &mut tape, &ids, &labels, &weights).unwrap();
        tape.backward(root).unwrap();
        ids.iter()
            .map(|&id| tape.grad(id).unwrap().iter().map(|v| v.to_f64()).collect())
            .collect()
    };
    let grads_f64: Vec<Vec<f64>> = {
        let weights = [1.25f64, 0.75, 1.0];
        let mut tape = GradTape::<f64>::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|p| {
                let cast = Tensor::<f64>::new(
                    p.shape().to_vec(),
                    p.data().iter().map(|v| *v as f64).collect(),
                )
                .unwrap();
                tape.leaf(cast.with_grad(true))
            })
            .collect();
        let root = spec_loss(&spec, &mut tape, &ids, &labels, &weights).unwrap();
        tape.backward(root).unwrap();
        ids.iter()
            .map(|&id| tape.grad(id).unwrap().to_vec())
            .collect()
    };

    let mut worst = 0.0f64;
    for (a, b) in grads_f32.iter().zip(&grads_f64) {
        for (&x, &y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(0.1);
            worst = worst.max(rel);
        }
    }
    worst
}

fn main() {
    sweep32("batchnorm", bn_spaced::<f32>, &[1e-2, 2e-2, 3e-2, 5e-2], 100);
    sweep64("batchnorm", bn_spaced::<f64>, &[1e-5, 3e-5]);
}
