use autodiff::{gradcheck, Tape, Tensor};
use difflm::denoiser::{Denoise, Denoiser, DenoiserConfig, Parametrization};
use difflm::rng::{normal, seeded};
use difflm::schedule::Schedule;

fn toy(seq_len: usize, dim: usize) -> Denoiser {
    let cfg = DenoiserConfig {
        seq_len,
        latent_dim: dim,
        width: 16,
        layers: 2,
        heads: 2,
        max_step: 100,
        parametrization: Parametrization::X0,
        skip: true,
    };
    let mut d = Denoiser::new(cfg, &mut seeded(7)).unwrap();
    d.set_skip(&Schedule::sqrt(100).unwrap(), 0.1).unwrap();
    d
}

fn latent(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(&mut rng)).collect()).unwrap()
}

#[test]
fn output_shape_matches_input() {
    for (n, d) in [(16, 16), (64, 16)] {
        let m = toy(n, d);
        let x = latent(2 * n, d, 1);
        let y = m.predict(&x, &[3, 90]).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn forward_is_deterministic() {
    let a = toy(8, 4);
    let b = toy(8, 4);
    let x = latent(8, 4, 2);
    assert_eq!(a.predict(&x, &[17]).unwrap().data(), b.predict(&x, &[17]).unwrap().data());
}

#[test]
fn bad_shapes_and_steps_rejected() {
    let m = toy(8, 4);
    assert!(m.predict(&latent(7, 4, 0), &[1]).is_err());
    assert!(m.predict(&latent(8, 3, 0), &[1]).is_err());
    assert!(m.predict(&latent(8, 4, 0), &[101]).is_err());
    assert!(m.predict(&latent(8, 4, 0), &[1, 2]).is_err());
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let m = toy(4, 3);
    let w = latent(4, 3, 9);
    let report = gradcheck(
        |tape: &mut Tape, x| {
            let p = m.store.bind(tape, false).map_err(|_| autodiff::AutodiffError::NonFinite { op: "bind" })?;
            let y = m.forward(tape, &p, x, &[42], None).map_err(|_| autodiff::AutodiffError::NonFinite { op: "forward" })?;
            let wv = tape.constant(w.clone())?;
            let prod = tape.mul(y, wv)?;
            tape.sum(prod)
        },
        &latent(4, 3, 10),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn time_conditioning_properties() {
    let m = toy(4, 3);
    let a = m.time_conditioning(5).unwrap();
    assert_ne!(a, m.time_conditioning(6).unwrap());
    assert_eq!(a, m.time_conditioning(5).unwrap());
    assert!(m.time_conditioning(101).is_err());
    let all: Vec<Vec<f64>> = (0..=100).map(|t| m.time_conditioning(t).unwrap()).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
}

#[test]
fn permutation_covariant_without_positions() {
    let mut m = toy(6, 3);
    let pos = m.position_param();
    let idx = m.store.names().iter().position(|n| n == "denoiser.pos").unwrap();
    assert_eq!(m.store.get(pos).shape(), &[6, 16]);
    m.store.tensors_mut()[idx] = Tensor::zeros(&[6, 16]);
    let x = latent(6, 3, 3);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut px = Tensor::zeros(&[6, 3]);
    for (i, &p) in perm.iter().enumerate() {
        px.row_mut(i).copy_from_slice(x.row(p));
    }
    let y = m.predict(&x, &[10]).unwrap();
    let py = m.predict(&px, &[10]).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in py.row(i).iter().zip(y.row(p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
