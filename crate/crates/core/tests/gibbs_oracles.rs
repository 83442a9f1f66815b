//! Clustering-sampler oracle checks; see `oracles/gibbs.rs`.

mod oracles;

use oracles::gibbs;

#[test]
fn allocation_conditional_matches_enumeration() {
    gibbs::allocation_conditional_matches_enumeration();
}

#[test]
fn allocation_conditional_high_power() {
    gibbs::allocation_conditional_high_power();
}

#[test]
fn successive_conditional_joint_distribution() {
    gibbs::successive_conditional_joint_distribution();
}

#[test]
fn concordance_posterior_matches_importance_sampling() {
    gibbs::concordance_posterior_matches_importance_sampling();
}

#[test]
fn channel_evidence_two_estimators_agree() {
    gibbs::channel_evidence_two_estimators_agree();
}

#[test]
fn qstar_update_preserves_its_conditional() {
    gibbs::qstar_update_preserves_its_conditional();
}
