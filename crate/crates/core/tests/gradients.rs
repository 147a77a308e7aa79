mod common;

use common::grad_suite::{self, TOL};

fn assert_report(name: &str, rep: turbo_i2i::gradcheck::GradCheckReport) {
    for p in &rep.probes {
        assert!(
            p.rel_err < TOL,
            "{name}: {}[{}] analytic {} numeric {} rel {}",
            p.name,
            p.index,
            p.analytic,
            p.numeric,
            p.rel_err
        );
    }
}

#[test]
fn unpaired_objective_gradients() {
    assert_report("unpaired", grad_suite::unpaired());
}

#[test]
fn paired_objective_gradients() {
    assert_report("paired", grad_suite::paired());
}

#[test]
fn diversity_loss_gradients() {
    assert_report("diversity", grad_suite::diversity());
}

#[test]
fn discriminator_loss_gradients() {
    assert_report("gan_d", grad_suite::gan_d());
}

#[test]
fn generator_gan_loss_gradients() {
    assert_report("gan_g", grad_suite::gan_g());
}

#[test]
fn d_score_pixel_gradients() {
    assert_report("d_score", grad_suite::d_score_pixels());
}

#[test]
fn probes_see_nonzero_gradients() {
    for (name, rep) in grad_suite::all() {
        let live = rep
            .probes
            .iter()
            .filter(|p| p.analytic.abs() > 1e-6)
            .count();
        assert!(
            live >= rep.probes.len() / 2,
            "{name}: only {live} live probes"
        );
    }
}
