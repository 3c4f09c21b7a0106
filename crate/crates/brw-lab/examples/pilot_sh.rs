//! Pilot for the Seneta-Heyde ratio gate: how do the medians of
//! sqrt(n) W_n / D_{n+M} depend on the freeze cap and the proxy depth?
//! Same replica streams at every cap, so differences are tightly coupled.

use brw_lab::engine::{run_tree, TreeConfig};
use brw_lab::model::OffspringLaw;
use brw_lab::stats::median_with_se;
use brw_lab::{replica_rng, streams};

fn main() {
    let law = OffspringLaw::dyadic_gaussian();
    let grid = [8usize, 12, 16, 20];
    let reps: u32 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let target = (2.0 / (std::f64::consts::PI * law.sigma2())).sqrt();
    println!("target {target:.4}, {reps} replicas per cell");
    println!("cap   n  med(rWn/D2n)  se      med(rWn/Dn)   se      med(W_n) med(D_2n) frozen_share");

    for cap in [12.0f64, 14.0, 16.0] {
        for &n in &grid {
            let config = TreeConfig {
                freeze_cap: Some(cap),
                ..TreeConfig::plain(n, n)
            };
            let mut deep = Vec::new();
            let mut shallow = Vec::new();
            let mut w_meds = Vec::new();
            let mut d_meds = Vec::new();
            let mut frozen = 0.0;
            for r in 0..reps {
                let mut rng = replica_rng(7, streams::SENETA_HEYDE, r);
                let run = run_tree(&law, &config, &mut rng).unwrap();
                let rt = (n as f64).sqrt();
                let wn = run.track.w[n];
                let d2n = run.track.d_infty_proxy;
                let dn = run.track.d[n];
                if d2n > 0.0 {
                    deep.push(rt * wn / d2n);
                }
                if dn > 0.0 {
                    shallow.push(rt * wn / dn);
                }
                w_meds.push(wn);
                d_meds.push(d2n);
                frozen += run.track.lost_mass_upper;
            }
            let (md, sd) = median_with_se(&deep).unwrap();
            let (ms, ss) = median_with_se(&shallow).unwrap();
            let (mw, _) = median_with_se(&w_meds).unwrap();
            let (mdd, _) = median_with_se(&d_meds).unwrap();
            println!(
                "{cap:>4} {n:>3}  {md:.4}        {sd:.4}  {ms:.4}        {ss:.4}  {mw:.4}   {mdd:.4}    {:.4}",
                frozen / reps as f64
            );
        }
        println!();
    }
}
