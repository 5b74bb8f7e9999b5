use gridveil::adjoint::{postprocess, LossSpec, OptConfig};
use gridveil::dp::{dp_release, Bounds, PrivacyParams};
use gridveil::grid::Conventions;
use gridveil::kron::reduce_network;
use gridveil::sim::{simulate_reduced, trajectory_mismatch, LoadEvent, SimConfig};
use nalgebra::DVector;

fn main() {
    let base = gridveil::datasets::ieee30::<f64>();
    let sim = SimConfig::new(0.01, 30.0).unwrap();
    for (name, conv) in [
        ("literal r, t=1/20", Conventions { droop_is_inverse: false, governor_is_time_constant: false }),
        ("inverse r, t=1/20", Conventions { droop_is_inverse: true, governor_is_time_constant: false }),
        ("inverse r, t=20", Conventions { droop_is_inverse: true, governor_is_time_constant: true }),
        ("literal r, t=20", Conventions { droop_is_inverse: false, governor_is_time_constant: true },),
    ] {
        let net = base.apply_conventions(conv);
        let truth = reduce_network(&net).unwrap();
        let load = |id: usize| net.nodes[net.index_of(id).unwrap()].load;
        let presets: Vec<Vec<(usize, f64)>> = vec![
            net.nodes.iter().map(|p| (p.id, 0.05 * p.load)).collect(),
            vec![(3, 0.2), (4, 0.2)],
            vec![(5, 0.2), (20, 0.2)],
            vec![(10, -load(10)), (30, -load(30))],
            vec![(1, 0.5)],
        ];
        let mk_event = |deltas: &[(usize, f64)], t: f64| {
            let mut b = DVector::zeros(6);
            let mut i24 = DVector::zeros(24);
            for &(id, dv) in deltas {
                let idx = net.index_of(id).unwrap();
                if let Some(p) = net.boundary.iter().position(|&x| x == idx) { b[p] += dv; }
                if let Some(p) = net.interior.iter().position(|&x| x == idx) { i24[p] += dv; }
            }
            LoadEvent { time: t, boundary: b, interior: i24 }
        };
        let suite: Vec<LoadEvent<f64>> = presets.iter().map(|d| mk_event(d, 10.0)).collect();
        let refs: Vec<_> = suite.iter().map(|e| simulate_reduced(&truth, &[e.clone()], &sim).unwrap().omega).collect();
        let mut lap_mean = 0.0;
        for seed in 0..10u64 {
            let obf = dp_release(&net, &PrivacyParams::new(0.5), &Bounds::default(), seed).unwrap();
            let mut acc = 0.0;
            for (e, r) in suite.iter().zip(refs.iter()) {
                let o = simulate_reduced(&obf.reduced, &[e.clone()], &sim).unwrap().omega;
                acc += trajectory_mismatch(&o, r, 0.01);
            }
            lap_mean += acc / 5.0 / 10.0;
        }
        // Fit ratios for 5 seeds.
        let train = mk_event(&net.nodes.iter().map(|p| (p.id, 0.2 * p.load)).collect::<Vec<_>>(), 0.0);
        let omega_ref = simulate_reduced(&truth, &[train.clone()], &sim).unwrap().omega;
        let mut ratios = Vec::new();
        for seed in 0..5u64 {
            let obf = dp_release(&net, &PrivacyParams::new(0.5), &Bounds::default(), seed).unwrap();
            let spec = LossSpec::for_release(&obf, omega_ref.clone(), vec![train.clone()], sim, 1e-4).unwrap();
            let cfg = OptConfig { max_iters: 100, ..OptConfig::default() };
            match postprocess(&obf, &spec, &cfg) {
                Ok(out) => ratios.push(out.trace.mismatch_at(100).unwrap() / out.trace.rows[0].mismatch),
                Err(e) => { println!("  {name}: fit error {e}"); ratios.push(f64::NAN); }
            }
        }
        println!("{name}: mean L_lap {lap_mean:.3e}  fit ratios {:?}",
                 ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>());
    }
}
