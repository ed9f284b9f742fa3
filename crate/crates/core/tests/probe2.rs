use iovfl::contracts::{
    best_response, initial_menus, solve_payment_proportions, EquilibriumOptions, SvCost,
    VspProfile,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const LAMBDA: f64 = 12.0;
const UPSILON: f64 = 21.0;
const XI: f64 = 5.0;

fn dump_aggregate(menus: &[iovfl::contracts::ContractMenu], props: &iovfl::contracts::PaymentProportions, profile: &VspProfile, tag: &str) {
    let j_types = profile.num_types();
    let mut prev = (0.0f64, 0.0f64);
    for j in 0..j_types {
        let mut z = 0.0;
        let mut paid = 0.0;
        for (m, menu) in menus.iter().enumerate() {
            z += props.rows[j][m] * menu.zeta[j];
            paid += props.rows[j][m] * menu.phi[j];
        }
        let root = z.max(0.0).sqrt();
        if j > 0 {
            let down = profile.thetas[j] * LAMBDA * (root - prev.0) - (paid - prev.1);
            let up = (paid - prev.1) - profile.thetas[j - 1] * LAMBDA * (root - prev.0);
            if down < -1e-9 || up < -1e-9 {
                println!("{tag} pair {}->{}: down={down:.4} up={up:.4} droot={:.4} dpaid={:.4}", j - 1, j, root - prev.0, paid - prev.1);
            }
        }
        prev = (root, paid);
    }
}

#[test]
fn trace_one_instance() {
    let i = 4usize;
    let mut rng = ChaCha12Rng::seed_from_u64(1000 + i as u64);
    let n_sv = 5;
    let b_max = 125.0;
    let profile = VspProfile::with_uniform_types(10, LAMBDA, b_max).unwrap();
    let caps: Vec<f64> = (0..n_sv).map(|_| rng.random_range(0.15..0.95)).collect();
    let costs: Vec<SvCost> = (0..n_sv).map(|_| SvCost { xi: XI }).collect();
    let opts = EquilibriumOptions::default();

    let mut menus = initial_menus(&caps, UPSILON, &profile);
    for sweep in 1..=27 {
        let mut any = false;
        let mut props = solve_payment_proportions(&menus, &profile, &opts.p1).unwrap();
        let mut dirty = false;
        for n in 0..n_sv {
            if dirty {
                props = solve_payment_proportions(&menus, &profile, &opts.p1).unwrap();
                dirty = false;
            }
            let br = best_response(
                n, &menus, &props, &profile, &costs[n], &caps, UPSILON, &opts.grid, opts.gamma,
            )
            .unwrap();
            if sweep >= 25 {
                println!(
                    "sweep {sweep} sv {n}: inc={} any={} moved={} profit={:.6}",
                    br.incumbent_feasible as u8, br.any_feasible as u8, br.improved as u8, br.profit
                );
                if br.improved {
                    println!("  old zeta: {:?}", menus[n].zeta);
                    println!("  new zeta: {:?}", br.menu.zeta);
                    println!("  old phi:  {:?}", menus[n].phi.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
                    println!("  new phi:  {:?}", br.menu.phi.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
                }
            }
            if br.improved {
                menus[n] = br.menu;
                any = true;
                dirty = true;
                if sweep >= 25 {
                    let fresh = solve_payment_proportions(&menus, &profile, &opts.p1).unwrap();
                    dump_aggregate(&menus, &fresh, &profile, &format!("after sv {n} move:"));
                }
            }
        }
        if !any {
            println!("converged at sweep {sweep}");
            break;
        }
    }
    panic!("probe only");
}
