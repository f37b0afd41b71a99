use annoconsensus::experiment::{votes_benefit, VotesBenefitConfig};

fn main() {
    let config = VotesBenefitConfig::default();
    for seed in 0..5 {
        let r = votes_benefit(&config, seed).expect("experiment runs");
        println!(
            "seed {seed}: plain {:.4} votes {:.4} single {:.4}",
            r.plain, r.votes, r.single
        );
    }
}
