//! Fits a line with AdamW on the tape, then checks the loss gradient
//! against central finite differences.

use gradtape::{adamw_step, grad_check_params, Graph, OptimState, ParamStore, Rng, Tensor};

fn main() -> gradtape::Result<()> {
    let mut rng = Rng::new(0, 0);
    let xs: Vec<f64> = (0..32).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 0.5 + 0.01 * rng.standard_normal()).collect();
    let x = Tensor::new(vec![32, 1], xs)?;
    let y = Tensor::new(vec![32, 1], ys)?;

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[1, 1]));
    let b = store.add("b", Tensor::zeros(&[1]));
    let loss_fn = |g: &mut Graph, store: &ParamStore| {
        let (wv, bv) = (g.param(store, w), g.param(store, b));
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let pred = g.matmul(xv, wv)?;
        let pred = g.add_row(pred, bv)?;
        g.squared_error(pred, yv)
    };

    let mut state = OptimState::new(&store, 0.05, 0.0);
    for it in 0..300 {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, &store)?;
        let grads = g.backward(loss)?.for_store(&store);
        adamw_step(&mut store, &grads, &mut state)?;
        if it % 100 == 0 {
            println!("step {it}: loss {:.5}", g.value(loss).item());
        }
    }
    println!("w = {:.3}, b = {:.3}", store.get(w).item(), store.get(b).item());
    println!("gradient check error {:.2e}", grad_check_params(&store, loss_fn, 1e-6)?);
    Ok(())
}
