//! Runnable verification suites: finite-difference gradient checks for
//! every differentiable operation (including the composite training
//! losses), and brute-force oracles for the clustering metrics. Both the
//! `check` CLI subcommand and the acceptance tests drive these.

use crate::bank::MemoryBank;
use crate::clustering;
use crate::contrastive::{info_nce, ContrastiveBatch};
use crate::error::{Error, Result};
use crate::model::{Arch, Autoencoder, Mode, ParamMode};
use crate::selfexpress;
use crate::tensor::{rel_err, Activation, ParameterSet, Tape, Tensor, Var};

const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check: the worst relative error over all
/// instances and inputs, against the op's tolerance.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Central finite differences for a scalar-valued tape program against its
/// analytic gradients. `build` must be a pure function of the leaf values.
pub fn fd_check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    type EvalOut = (f64, Vec<Option<Vec<f64>>>);
    let eval = |tensors: &[Tensor]| -> Result<EvalOut> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Contract("fd_check: loss must be scalar".into()));
        }
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let grad = analytic[which]
            .clone()
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= FD_STEP;
            let (fp, _) = eval(&plus)?;
            let (fm, _) = eval(&minus)?;
            numeric[e] = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&grad, &numeric));
    }
    Ok(worst)
}

/// Finite differences through a parameterized loss: perturbs every element
/// of every parameter. `loss` must be a pure function of the parameter
/// values; analytic gradients come from the same closure's backward pass.
pub fn fd_check_params<F>(params: &ParameterSet, loss: F) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, ParameterSet)>,
{
    let (_, with_grads) = loss(params)?;
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let numel = params.get(name)?.numel();
        let analytic = with_grads
            .get(name)?
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut numeric = vec![0.0; numel];
        for e in 0..numel {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[e] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[e] -= FD_STEP;
            numeric[e] = (loss(&plus)?.0 - loss(&minus)?.0) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// The full gradient suite: five random instances per operation plus the
/// composite BDSC (reconstruction + self-expression) and InfoNCE losses.
pub fn grad_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let instances = 5;

    let mut run = |name: &str,
                   tol: f64,
                   f: &mut dyn FnMut(u64) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            worst = worst.max(f(inst as u64)?);
        }
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance: tol,
            instances,
        });
        Ok(())
    };

    run("matmul", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-matmul", i, 0);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        fd_check(&[a, b], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        })
    })?;

    run("conv2d", 1e-5, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-conv", i, 0);
        let x = Tensor::randn(vec![1, 1, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(vec![1, 1, 3, 3], 1.0, &mut rng);
        fd_check(&[x, k], |t, v| {
            let y = t.conv2d(v[0], v[1], 2)?;
            Ok(t.sum_sq(y))
        })
    })?;

    run("deconv2d", 1e-5, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-deconv", i, 0);
        let y = Tensor::randn(vec![1, 2, 3, 3], 1.0, &mut rng);
        let k = Tensor::randn(vec![2, 1, 3, 3], 1.0, &mut rng);
        fd_check(&[y, k], |t, v| {
            let x = t.deconv2d(v[0], v[1], 2)?;
            Ok(t.sum_sq(x))
        })
    })?;

    run("relu", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-relu", i, 0);
        // keep points away from the kink at zero
        let mut x = Tensor::randn(vec![8], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.5;
            }
        }
        fd_check(&[x], |t, v| {
            let y = t.activation(v[0], Activation::Relu);
            Ok(t.sum_sq(y))
        })
    })?;

    run("gelu", 1e-6, &mut |i| {
        let mut x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0])?;
        if i > 0 {
            let mut rng = crate::rng::rng_for(seed, "g-gelu", i, 0);
            x = Tensor::randn(vec![6], 1.5, &mut rng);
        }
        fd_check(&[x], |t, v| {
            let y = t.activation(v[0], Activation::Gelu);
            Ok(t.sum(y))
        })
    })?;

    run("batchnorm", 1e-5, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-bn", i, 0);
        let x = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let gamma = Tensor::randn(vec![3], 0.5, &mut rng);
        let beta = Tensor::randn(vec![3], 0.5, &mut rng);
        fd_check(&[x, gamma, beta], |t, v| {
            let mut rm = Tensor::zeros(vec![3]);
            let mut rv = Tensor::full(vec![3], 1.0);
            let y = t.batchnorm_train(v[0], v[1], v[2], 1e-5, &mut rm, &mut rv, 0.9)?;
            Ok(t.sum_sq(y))
        })
    })?;

    run("reshape", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-reshape", i, 0);
        let x = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        fd_check(&[x], |t, v| {
            let y = t.reshape(v[0], vec![6, 4])?;
            let z = t.flatten(y)?;
            Ok(t.sum_sq(z))
        })
    })?;

    run("frobenius_sq", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-frob", i, 0);
        let a = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        fd_check(&[a, b], |t, v| t.frobenius_sq(v[0], v[1]))
    })?;

    run("row_normalize", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-rownorm", i, 0);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        fd_check(&[x], |t, v| {
            let y = t.row_normalize(v[0])?;
            let w = t.row_dot(y, y)?;
            let probe = t.leaf(&Tensor::new(vec![3, 4], (0..12).map(|k| k as f64 * 0.1).collect())?, false);
            let yp = t.row_dot(y, probe)?;
            let s1 = t.sum(w);
            let s2 = t.sum(yp);
            t.add(s1, s2)
        })
    })?;

    run("rows_gather_overwrite", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-rows", i, 0);
        let base = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let live = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let c = Tensor::randn(vec![5, 5], 0.5, &mut rng);
        fd_check(&[base, live, c], |t, v| {
            let full = t.rows_overwrite(v[0], v[1], &[1, 3])?;
            let rows = t.rows_gather(v[2], &[1, 3])?;
            let prod = t.matmul(rows, full)?;
            Ok(t.sum_sq(prod))
        })
    })?;

    run("info_nce", 1e-6, &mut |i| {
        let mut rng = crate::rng::rng_for(seed, "g-nce", i, 0);
        let zhat = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let zplus = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut negs = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        for r in 0..5 {
            let norm: f64 = negs.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in negs.row_mut(r) {
                *v /= norm;
            }
        }
        let include = i % 2 == 0;
        fd_check(&[zhat, zplus], move |t, v| {
            let anchors = t.row_normalize(v[0])?;
            let positives = t.row_normalize(v[1])?;
            let negatives = t.constant(&negs);
            let batch = ContrastiveBatch::new(t, anchors, positives, negatives, 0.5)?;
            info_nce(t, &batch, include)
        })
    })?;

    run("composite_bdsc_loss", 1e-4, &mut |i| {
        composite_bdsc_check(seed, i)
    })?;

    run("composite_conv_recon", 1e-4, &mut |i| {
        composite_conv_check(seed, i)
    })?;

    Ok(out)
}

/// End-to-end training loss: encoder -> bank write -> C-reconstruction ->
/// decoder, recon + alpha*se + beta*reg, checked against finite
/// differences through every parameter (encoder, decoder and C).
fn composite_bdsc_check(seed: u64, instance: u64) -> Result<f64> {
    let mut rng = crate::rng::rng_for(seed, "g-composite", instance, 0);
    let n = 5usize;
    let d = 6usize;
    let x = Tensor::randn(vec![n, d], 1.0, &mut rng);
    let bank_rows = Tensor::randn(vec![n, 4], 1.0, &mut rng);
    let indices = [1usize, 3];

    let mut params = ParameterSet::new();
    let model = Autoencoder::init(
        crate::data::SampleShape::Flat(d),
        Arch::Mlp {
            hidden: 5,
            latent: 4,
            activation: Activation::Gelu,
        },
        crate::rng::derive_seed(seed, "g-composite-model", instance, 0),
        &mut params,
    )?;
    let mut c0 = Tensor::randn(vec![n, n], 0.3, &mut rng);
    selfexpress::project_zero_diag(&mut c0);
    params.insert(selfexpress::C_PARAM, c0)?;

    let loss_fn = |p: &ParameterSet| -> Result<(f64, ParameterSet)> {
        let mut p = p.clone();
        let mut model = model.clone();
        let mut bank = MemoryBank::zeros(n, 4);
        bank.write_batch(&(0..n).collect::<Vec<_>>(), &bank_rows, 0, 0)?;
        bank.mark_initialized();

        let mut tape = Tape::new();
        let batch_x_t = {
            let rows: Vec<Vec<f64>> = indices.iter().map(|&i| x.row(i).to_vec()).collect();
            Tensor::from_rows(&rows)?
        };
        let batch_x = tape.constant_owned(batch_x_t);
        let z = model.encode(&mut tape, &p, batch_x, Mode::Train, ParamMode::Trainable)?;
        bank.write_batch(&indices, &tape.value(z).detached(), 0, 1)?;
        let c = tape.param(&p, selfexpress::C_PARAM)?;
        let z_hat = selfexpress::reconstruct_batch(&mut tape, c, &bank, &indices, z)?;
        let x_hat = model.decode(&mut tape, &p, z_hat, Mode::Train, ParamMode::Trainable)?;
        let recon = tape.frobenius_sq(batch_x, x_hat)?;
        let se = selfexpress::se_loss(&mut tape, z, z_hat)?;
        let reg = selfexpress::reg_loss(&mut tape, c);
        let total = selfexpress::total_loss(&mut tape, recon, se, reg, 2.0, 0.5)?;
        let value = tape.scalar(total);
        tape.backward(total)?;
        tape.grads_into(&mut p)?;
        Ok((value, p))
    };
    fd_check_params(&params, loss_fn)
}

/// Conv autoencoder reconstruction loss (conv + batchnorm + gelu encoder,
/// deconv decoder) through finite differences.
fn composite_conv_check(seed: u64, instance: u64) -> Result<f64> {
    let mut rng = crate::rng::rng_for(seed, "g-conv-comp", instance, 0);
    let x = Tensor::randn(vec![2, 1, 4, 4], 0.5, &mut rng);
    let mut params = ParameterSet::new();
    let model = Autoencoder::init(
        crate::data::SampleShape::Image(1, 4, 4),
        Arch::Conv {
            channels: vec![2],
            kernel: 3,
            stride: 2,
            activation: Activation::Gelu,
            batchnorm: true,
        },
        crate::rng::derive_seed(seed, "g-conv-model", instance, 0),
        &mut params,
    )?;

    let loss_fn = |p: &ParameterSet| -> Result<(f64, ParameterSet)> {
        let mut p = p.clone();
        let mut model = model.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let z = model.encode(&mut tape, &p, xv, Mode::Train, ParamMode::Trainable)?;
        let x_hat = model.decode(&mut tape, &p, z, Mode::Train, ParamMode::Trainable)?;
        let loss = tape.frobenius_sq(xv, x_hat)?;
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        tape.grads_into(&mut p)?;
        Ok((value, p))
    };
    fd_check_params(&params, loss_fn)
}

/// `<conv(x,k), y> == <x, deconv(y,k)>` on random buffers (stride-1
/// instances use odd 5x5 inputs, stride-2 instances 6x6).
pub fn adjointness_check(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..6u64 {
        let mut rng = crate::rng::rng_for(seed, "adjoint", i, 0);
        let stride = 1 + (i % 2) as usize;
        let h = if stride == 1 { 5usize } else { 6usize };
        let x = Tensor::randn(vec![2, 2, h, h], 1.0, &mut rng);
        let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        let hh = h / stride;
        let y = Tensor::randn(vec![2, 3, hh, hh], 1.0, &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let kv = tape.constant(&k);
        let yv = tape.constant(&y);
        let cx = tape.conv2d(xv, kv, stride)?;
        let dy = tape.deconv2d(yv, kv, stride)?;
        let lhs: f64 = tape
            .value(cx)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(tape.value(dy).data())
            .map(|(a, b)| a * b)
            .sum();
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// One metric-oracle comparison.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Brute-force clustering accuracy: maximum match fraction over all
/// one-to-one mappings of cluster ids onto class ids (permutations of the
/// padded contingency square). Exponential; fine for <= 8 clusters.
pub fn acc_bruteforce(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension("bad label arrays".into()));
    }
    let k = (pred.iter().max().unwrap() + 1).max(truth.iter().max().unwrap() + 1);
    if k > 8 {
        return Err(Error::Config("brute-force ACC limited to 8 clusters".into()));
    }
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |perm| {
        let matched: usize = (0..k).map(|c| table[c][perm[c]]).sum();
        best = best.max(matched);
    });
    Ok(best as f64 / pred.len() as f64)
}

fn permute(items: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == items.len() {
        visit(items);
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permute(items, at + 1, visit);
        items.swap(at, i);
    }
}

/// Independent NMI evaluation straight from the joint distribution.
pub fn nmi_direct(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension("bad label arrays".into()));
    }
    let n = pred.len() as f64;
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0f64; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        joint[p][t] += 1.0 / n;
    }
    let pm: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let rm: Vec<f64> = (0..kt).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &pij) in row.iter().enumerate() {
            if pij > 0.0 {
                mi += pij * (pij / (pm[i] * rm[j])).ln();
            }
        }
    }
    let h = |probs: &[f64]| -> f64 {
        -probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    };
    let denom = h(&pm) + h(&rm);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * mi / denom)
}

/// Runs the metric oracles: ACC vs brute force on random label pairs, NMI
/// vs the direct evaluation, and exact block recovery in spectral
/// clustering for k in {2, 3, 5}.
pub fn metric_oracle_suite(seed: u64, pairs: usize) -> Result<Vec<OracleCheck>> {
    use rand::Rng;
    let mut out = Vec::new();

    let mut worst_acc = 0.0f64;
    let mut worst_nmi = 0.0f64;
    for i in 0..pairs {
        let mut rng = crate::rng::rng_for(seed, "oracle-labels", i as u64, 0);
        let len = rng.gen_range(8..40);
        let kp = rng.gen_range(2..=6);
        let kt = rng.gen_range(2..=6);
        let mut pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..kp)).collect();
        let mut truth: Vec<usize> = (0..len).map(|_| rng.gen_range(0..kt)).collect();
        // densify ids so label sets are 0..K-1
        for v in [&mut pred, &mut truth] {
            let mut ids: Vec<usize> = v.clone();
            ids.sort_unstable();
            ids.dedup();
            for x in v.iter_mut() {
                *x = ids.binary_search(x).expect("present");
            }
        }
        let fast = clustering::acc(&pred, &truth)?;
        let brute = acc_bruteforce(&pred, &truth)?;
        worst_acc = worst_acc.max((fast - brute).abs());
        let a = clustering::nmi(&pred, &truth)?;
        let b = nmi_direct(&pred, &truth)?;
        worst_nmi = worst_nmi.max((a - b).abs());
    }
    out.push(OracleCheck {
        name: format!("acc vs brute force ({pairs} pairs)"),
        passed: worst_acc == 0.0,
        detail: format!("max |diff| = {worst_acc:e}"),
    });
    out.push(OracleCheck {
        name: format!("nmi vs direct evaluation ({pairs} pairs)"),
        passed: worst_nmi <= 1e-12,
        detail: format!("max |diff| = {worst_nmi:e}"),
    });

    for (k, sizes) in [(2, vec![9, 13]), (3, vec![7, 5, 9]), (5, vec![4, 6, 5, 7, 4])] {
        let n: usize = sizes.iter().sum();
        let mut w = Tensor::zeros(vec![n, n]);
        let mut start = 0;
        for &s in &sizes {
            for i in start..start + s {
                for j in start..start + s {
                    if i != j {
                        w.set(i, j, 1.0);
                    }
                }
            }
            start += s;
        }
        let truth: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
            .collect();
        let aff = clustering::AffinityMatrix::new(w)?;
        let labels = clustering::spectral_cluster(&aff, k, seed)?;
        let a = clustering::acc(&labels, &truth)?;
        out.push(OracleCheck {
            name: format!("spectral recovery of {k} blocks"),
            passed: a == 1.0,
            detail: format!("acc = {a}"),
        });
    }
    Ok(out)
}
