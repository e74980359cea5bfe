#![allow(dead_code)]

use clnet::synth::{generate_case, GenConfig, PairedSample};

/// A 16-pixel case with two lesions, one of them visible in a single view.
pub fn two_lesion_occluded_case() -> PairedSample {
    let cfg = GenConfig {
        image_size: 16,
        min_lesions: 2,
        max_lesions: 2,
        min_radius: 1.5,
        max_radius: 2.5,
        p_occ: 0.5,
        max_distractors: 1,
        ..GenConfig::default()
    };
    (0..)
        .map(|seed| generate_case(seed, &cfg).unwrap())
        .find(|s| {
            s.pairs.len() == 2
                && s.pairs.iter().filter(|p| p.0.is_some() && p.1.is_some()).count() == 1
        })
        .unwrap()
}
