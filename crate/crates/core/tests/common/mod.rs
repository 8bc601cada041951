#![allow(dead_code)]

use ctxprobe::ingest::{join, parse_annotations, EvaluationUniverse, SceneTags};
use ctxprobe::stratify::Condition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Universe where image `i` holds `counts[i][c]` instances of class `c + 1`.
pub fn count_universe(counts: &[Vec<u64>], tags: &[Vec<&'static str>]) -> EvaluationUniverse {
    let k = counts[0].len();
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        images.push(json!({"id": i, "file_name": format!("{i}.jpg"), "width": 100, "height": 100}));
        for (c, &n) in row.iter().enumerate() {
            for _ in 0..n {
                let id = anns.len();
                anns.push(json!({"id": id, "image_id": i, "category_id": c + 1, "bbox": [1, 1, 5, 5]}));
            }
        }
    }
    let cats: Vec<_> = (1..=k).map(|c| json!({"id": c, "name": format!("c{c}")})).collect();
    let doc = json!({"images": images, "categories": cats, "annotations": anns});
    let dataset = parse_annotations(doc.to_string().as_bytes()).unwrap();
    let mut scene = SceneTags::default();
    for (i, t) in tags.iter().enumerate() {
        scene.tags.insert(i.to_string(), t.iter().map(|s| s.to_string()).collect());
    }
    join(dataset, &scene, None)
}

pub struct Instance {
    pub counts: Vec<Vec<u64>>,
    pub tags: Vec<Vec<&'static str>>,
    pub target: Vec<f64>,
    pub n: usize,
    pub condition: Condition,
    pub seed: u64,
}

/// Random stratification instance: 1 to 20 eligible images, n at most 10,
/// 2 to 4 classes, random target weights. Half the instances restrict the
/// pool with a tag condition and add up to four ineligible images.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..=4);
    let eligible = rng.gen_range(1..=20);
    let tagged = rng.gen_bool(0.5);
    let (condition, ineligible) = if tagged {
        let c = Condition::new("building", ["building"], Vec::<&str>::new()).unwrap();
        (c, rng.gen_range(0..=4))
    } else {
        (Condition::unconstrained("all"), 0)
    };
    let mut counts = Vec::new();
    let mut tags = Vec::new();
    for i in 0..eligible + ineligible {
        let mut row: Vec<u64> = (0..k)
            .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..=3) } else { 0 })
            .collect();
        if row.iter().sum::<u64>() == 0 {
            row[rng.gen_range(0..k)] = 1;
        }
        counts.push(row);
        tags.push(if tagged && i < eligible { vec!["building"] } else { vec![] });
    }
    let n = rng.gen_range(1..=eligible.min(10));
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut target: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let head: f64 = target[..k - 1].iter().sum();
    target[k - 1] = 1.0 - head;
    Instance {
        counts,
        tags,
        target,
        n,
        condition,
        seed,
    }
}
