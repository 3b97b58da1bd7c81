// probe: mini-batch leaf-EM vs Adam-leaf hybrid starting from a good fit
use canopy::circuit::*;
use canopy::data::*;
use canopy::opt::*;

fn mixture_circuit(d: usize, p_hi: f64, p_lo: f64, w: f64) -> Circuit {
    let mut b = CircuitBuilder::new(d);
    let hi: Vec<NodeId> = (0..d).map(|v| b.leaf(Var(v as u16), p_hi).unwrap()).collect();
    let lo: Vec<NodeId> = (0..d).map(|v| b.leaf(Var(v as u16), p_lo).unwrap()).collect();
    let ph = b.product(hi).unwrap();
    let pl = b.product(lo).unwrap();
    let s = b.sum(vec![ph, pl], vec![w, 1.0 - w]).unwrap();
    b.build(s).unwrap()
}

fn main() {
    let truth = mixture_circuit(8, 0.8, 0.2, 0.5);
    let data = sample_from_circuit(&truth, 2000, 5);
    let start = truth.avg_loglik(data.iter_rows()).unwrap();
    for batch in [8usize, 16, 32] {
        let mut em = truth.clone();
        let mut hy = truth.clone();
        let mut ls = LeafAdamState::from_circuit(&hy, AdamConfig::default());
        let mut em_min = f64::INFINITY;
        let mut em_early = Vec::new();
        for step in 0..30 {
            let rows: Vec<usize> = (0..batch).map(|k| (step * batch + k) % data.len()).collect();
            anemone_step(&mut em, rows.iter().map(|&r| data.row(r)), 0.5).unwrap();
            em_leaf_step(&mut em, rows.iter().map(|&r| data.row(r))).unwrap();
            let ll = em.avg_loglik(data.iter_rows()).unwrap();
            em_min = em_min.min(ll);
            if step < 5 { em_early.push((ll * 1000.0).round() / 1000.0); }
            anemone_step(&mut hy, rows.iter().map(|&r| data.row(r)), 0.5).unwrap();
            adam_leaf_step(&mut hy, rows.iter().map(|&r| data.row(r)), &mut ls).unwrap();
        }
        let em_ll = em.avg_loglik(data.iter_rows()).unwrap();
        let hy_ll = hy.avg_loglik(data.iter_rows()).unwrap();
        println!("batch {batch}: start {start:.4} em-final {em_ll:.4} (min {em_min:.4}, early {em_early:?})  hybrid-final {hy_ll:.4}");
    }
}
