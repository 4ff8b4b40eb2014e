use gmvc::nn::{gradcheck, xavier_init, BatchNorm, Blstm, Conv1d, GradcheckOptions, Graph, Linear, Mat, Mode, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum of the output against a fixed random projection, so every
/// output cell carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, w: &Mat<f64>) -> Var {
    let c = g.constant(w.clone());
    let p = g.mul(y, c);
    g.sum_all(p)
}

fn opts() -> GradcheckOptions {
    GradcheckOptions {
        eps: 1e-5,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = Linear::new("fc", 5, 3, true);
    let mut store = ParamStore::<f64>::new(1);
    layer.register(&mut store).unwrap();
    xavier_init(&mut store);
    let x = random(&mut rng, 4, 5);
    let w = random(&mut rng, 4, 3);
    let r = gradcheck(&mut store, &opts(), |g, s| {
        let xv = g.constant(x.clone());
        let y = layer.forward(g, s, xv)?;
        Ok(project(g, y, &w))
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-6, "{}", r.render());
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer = Conv1d::new("conv", 3, 4, true);
    let mut store = ParamStore::<f64>::new(2);
    layer.register(&mut store).unwrap();
    xavier_init(&mut store);
    let x = random(&mut rng, 10, 3);
    let w = random(&mut rng, 10, 4);
    let r = gradcheck(&mut store, &opts(), |g, s| {
        let xv = g.constant(x.clone());
        let y = layer.forward(g, s, xv, 5)?;
        Ok(project(g, y, &w))
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-6, "{}", r.render());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fc = Linear::new("fc", 3, 4, false);
    let bn = BatchNorm::new("bn", 4);
    let mut store = ParamStore::<f64>::new(3);
    fc.register(&mut store).unwrap();
    bn.register(&mut store).unwrap();
    xavier_init(&mut store);
    let x = random(&mut rng, 6, 3);
    let w = random(&mut rng, 6, 4);
    let r = gradcheck(&mut store, &opts(), |g, s| {
        let xv = g.constant(x.clone());
        let h = fc.forward(g, s, xv)?;
        let y = bn.forward(g, s, h, Mode::Train)?;
        Ok(project(g, y, &w))
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-2, "{}", r.render());
}

#[test]
fn blstm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = Blstm::new("rnn", 3, 4);
    let mut store = ParamStore::<f64>::new(4);
    layer.register(&mut store).unwrap();
    xavier_init(&mut store);
    let x = random(&mut rng, 6, 3);
    let w = random(&mut rng, 6, 8);
    let r = gradcheck(&mut store, &opts(), |g, s| {
        let xv = g.constant(x.clone());
        let y = layer.forward(g, s, xv, 2, 3)?;
        Ok(project(g, y, &w))
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-3, "{}", r.render());
}
