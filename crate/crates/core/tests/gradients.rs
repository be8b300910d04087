mod common;

use common::*;
use mtree_core::model::Model;
use mtree_core::nn::Mode;
use mtree_core::objective::{Ablation, Terms};

fn check(ablation: Ablation, mode: Mode, terms: Terms) {
    let mut model = Model::<f64>::new(tiny_arch(ablation), 11).unwrap();
    perturb_running_stats(&mut model);
    let data = tiny_batch(model.net.architecture(), 2, 4);
    let errs = gradient_errors(&model, &data, mode, terms);
    let mut bad = Vec::new();
    for (name, rel, gnorm) in &errs {
        if *rel > 1e-4 {
            bad.push(format!("{name}: rel {rel:.3e} (|g| {gnorm:.3e})"));
        }
    }
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn full_objective_frozen_statistics() {
    check(Ablation::FULL, Mode::EVAL, ALL_TERMS);
}

#[test]
fn full_objective_batch_statistics() {
    check(Ablation::FULL, Mode::BATCH_STATS_PURE, ALL_TERMS);
}

#[test]
fn contribution_term_alone() {
    check(Ablation::FULL, Mode::EVAL, Terms { cg: true, ..Terms::NONE });
}

#[test]
fn distillation_term_alone() {
    check(Ablation::FULL, Mode::EVAL, Terms { sd: true, ..Terms::NONE });
}

#[test]
fn every_ablation_arm() {
    for (_, ab) in Ablation::sweep().into_iter().skip(1) {
        check(ab, Mode::EVAL, ALL_TERMS);
    }
}
