use std::time::Instant;

use uttail::fredholm::fgue_cdf;
use uttail::prelimit::{kpz_multipoint_tail, KpzQuery};
use uttail::tfunc::EvalParams;

fn main() {
    for &(x, t, s) in &[
        (0.0f64, 1.0f64, -1.0f64),
        (0.0, 1.0, 0.0),
        (0.0, 1.0, 1.0),
        (0.0, 1.0, 2.0),
        (0.4, 1.3, -1.0),
    ] {
        // h chosen so the one-point argument equals s
        let h = (s - x * x / t.powf(4.0 / 3.0)) * t.powf(1.0 / 3.0);
        let oracle = 1.0 - fgue_cdf(s);
        println!("== (x,t)=({x},{t}) s={s}  oracle={oracle:.12e}");
        let mut prev = None;
        for n_max in [1usize, 2, 3, 4, 5] {
            let q = KpzQuery::new(vec![x], vec![t], vec![h]).unwrap();
            let params = EvalParams {
                n_max,
                target_tol: 1e-7,
                max_tuples: 2e8,
                ..EvalParams::default()
            };
            let t0 = Instant::now();
            match kpz_multipoint_tail(&q, &params) {
                Ok(ev) => {
                    let dt = t0.elapsed().as_secs_f64();
                    let incr = prev.map(|p: f64| ev.value - p);
                    prev = Some(ev.value);
                    println!(
                        "n_max={n_max}  value={:+.12e}  err={:+.3e}  incr={}  trunc_rel={:.3e}  terms={}  {:.2}s",
                        ev.value,
                        ev.value - oracle,
                        incr.map(|x| format!("{x:+.3e}")).unwrap_or_default(),
                        ev.diagnostics["trunc_rel"],
                        ev.terms_used,
                        dt
                    );
                }
                Err(e) => println!("n_max={n_max}  ERROR: {e}"),
            }
        }
    }
}
