use cyclozeta::config::RunConfig;
use cyclozeta::field::FieldContext;
use cyclozeta::frobenius::*;
use std::time::Instant;

fn main() {
    // route independence at weight 2, p=2 M=3 (fast config with M > 1)
    let t0 = Instant::now();
    let ctx = FieldContext::build(2, 3, 120).unwrap();
    let mut cfg = RunConfig::desk(2, 3);
    cfg.precision = 120;
    let mut stacked = FrobeniusSolver::new(&ctx, &cfg);
    stacked.solve_weight(1, SolveRoute::StackedThenFallback).unwrap();
    stacked.solve_weight(2, SolveRoute::StackedThenFallback).unwrap();
    let mut paper = FrobeniusSolver::new(&ctx, &cfg);
    paper.solve_weight(1, SolveRoute::PaperOrder).unwrap();
    paper.solve_weight(2, SolveRoute::PaperOrder).unwrap();
    println!("paper route report: {:?}", paper.reports[1].route);
    let mut worst = i64::MAX;
    for i in 1..=3u32 {
        for word in words_of_weight(3, 2) {
            let a = stacked.resolved.g_coeff(i, &word).unwrap();
            let b = paper.resolved.g_coeff(i, &word).unwrap();
            let agree = a.agreement_valuation(&ctx, b);
            let claim = a.abs_precision().min(b.abs_precision());
            worst = worst.min(agree - claim.min(20));
            if agree < claim.min(20) {
                println!("MISMATCH g_{i}[{}]: agree {} claim {}", word.label(), agree, claim);
            }
        }
    }
    for word in words_of_weight(3, 2) {
        let a = stacked.resolved.h_coeff(&word).unwrap();
        let b = paper.resolved.h_coeff(&word).unwrap();
        let agree = a.agreement_valuation(&ctx, b);
        let claim = a.abs_precision().min(b.abs_precision()).min(20);
        if agree < claim {
            println!("MISMATCH h[{}]: agree {} claim {}", word.label(), agree, claim);
        }
    }
    println!("route independence worst margin: {worst}  ({:?})", t0.elapsed());

    // route labels
    for i in [1u32, 3] {
        for word in words_of_weight(3, 2).iter().take(6) {
            println!(
                "route g_{i}[{}] = {:?}",
                word.label(),
                paper.resolved.route(Source::G(i as u8), word)
            );
        }
    }
}
