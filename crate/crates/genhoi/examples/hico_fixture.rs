//! Regenerates `fixtures/hico_label_space.json`.
//!
//! Object and verb names follow the HICO-Det vocabulary. The pairing of verbs
//! with objects and the per-triplet training counts are a seeded
//! reconstruction that matches the published cardinalities: 600 triplets,
//! 138 rare, 12 unseen objects covering 100 triplets, 20 unseen verbs
//! covering 84 triplets.
//!
//! ```text
//! cargo run -p genhoi --example hico_fixture -- fixtures/hico_label_space.json
//! ```

use std::collections::BTreeSet;
use std::path::PathBuf;

use genhoi::label_space::{choose_random_verbs, Article, LabelSpace, ObjectRecord, TripletRecord, VerbRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBJECTS: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

const VERBS: [&str; 117] = [
    "adjust", "assemble", "block", "blow", "board", "break", "brush_with", "buy", "carry", "catch", "chase",
    "check", "clean", "control", "cook", "cut", "cut_with", "direct", "drag", "dribble", "drink_with", "drive",
    "dry", "eat", "eat_at", "exit", "feed", "fill", "flip", "flush", "fly", "greet", "grind", "groom", "herd",
    "hit", "hold", "hop_on", "hose", "hug", "hunt", "inspect", "install", "jump", "kick", "kiss", "lasso",
    "launch", "lick", "lie_on", "lift", "light", "load", "lose", "make", "milk", "move", "no_interaction",
    "open", "operate", "pack", "paint", "park", "pay", "peel", "pet", "pick", "pick_up", "point", "pour",
    "pull", "push", "race", "read", "release", "repair", "ride", "row", "run", "sail", "scratch", "serve",
    "set", "shear", "sign", "sip", "sit_at", "sit_on", "slide", "smell", "spin", "squeeze", "stab", "stand_on",
    "stand_under", "stick", "stir", "stop_at", "straddle", "swing", "tag", "talk_on", "teach", "text_on",
    "throw", "tie", "toast", "train", "turn", "type_on", "walk", "wash", "watch", "wave", "wear", "wield",
    "zip",
];

// Unseen-object list: 12 objects spread over the vocabulary.
const UO_OBJECTS: [&str; 12] = [
    "airplane", "bench", "giraffe", "suitcase", "frisbee", "skateboard", "wine glass", "banana", "hot dog",
    "couch", "laptop", "toothbrush",
];

const SEED: u64 = 2022;
const UV_SEED: u64 = 20;
const N_TRIPLETS: usize = 600;
const N_RARE: usize = 138;
const UO_TRIPLETS: usize = 100;
const UV_TRIPLETS: usize = 84;

fn gerund(verb: &str) -> String {
    let mut words = verb.split('_');
    let head = words.next().unwrap();
    let doubled = [
        "control", "cut", "drag", "flip", "hit", "hop", "hug", "pet", "run", "set", "sip", "sit", "spin", "stab", "stir", "stop",
        "tag", "zip",
    ];
    let ing = if doubled.contains(&head) {
        format!("{head}{}ing", head.chars().last().unwrap())
    } else if head == "lie" || head == "tie" {
        format!("{}ying", &head[..head.len() - 2])
    } else if head.ends_with('e') && !head.ends_with("ee") {
        format!("{}ing", &head[..head.len() - 1])
    } else {
        format!("{head}ing")
    };
    std::iter::once(ing).chain(words.map(str::to_string)).collect::<Vec<_>>().join(" ")
}

fn article(name: &str) -> Article {
    if name.starts_with(['a', 'e', 'i', 'o', 'u']) {
        Article::An
    } else {
        Article::A
    }
}

/// Splits `total` into `parts` positive integers with a skewed profile.
fn degrees(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..parts).map(|_| rng.gen::<f64>().powi(3) + 0.05).collect();
    let sum: f64 = weights.iter().sum();
    let spare = total - parts;
    let mut d: Vec<usize> = weights.iter().map(|w| 1 + (w / sum * spare as f64).floor() as usize).collect();
    let mut short = total - d.iter().sum::<usize>();
    while short > 0 {
        let i = rng.gen_range(0..parts);
        d[i] += 1;
        short -= 1;
    }
    d
}

/// Random bipartite pairing with prescribed degrees and no repeated pair.
fn pair_up(verbs: &[(usize, usize)], objects: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize)>> {
    let mut pairs = BTreeSet::new();
    let mut obj_left: Vec<(usize, usize)> = objects.to_vec();
    let mut order: Vec<(usize, usize)> = verbs.to_vec();
    order.sort_by_key(|&(_, d)| std::cmp::Reverse(d));
    for (v, d) in order {
        let mut avail: Vec<usize> = (0..obj_left.len()).filter(|&i| obj_left[i].1 > 0).collect();
        if avail.len() < d {
            return None;
        }
        // Prefer objects with the most remaining stubs so nothing is stranded.
        avail.shuffle(rng);
        avail.sort_by_key(|&i| std::cmp::Reverse(obj_left[i].1));
        for &i in &avail[..d] {
            pairs.insert((v, obj_left[i].0));
            obj_left[i].1 -= 1;
        }
    }
    Some(pairs.into_iter().collect())
}

fn main() {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures/hico_label_space.json"));
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let objects: Vec<ObjectRecord> = OBJECTS
        .iter()
        .enumerate()
        .map(|(id, n)| ObjectRecord { id, name: n.to_string(), article: article(n) })
        .collect();
    let verbs: Vec<VerbRecord> = VERBS
        .iter()
        .enumerate()
        .map(|(id, n)| {
            let none = *n == "no_interaction";
            VerbRecord { id, name: n.to_string(), gerund: (!none).then(|| gerund(n)), is_no_interaction: none }
        })
        .collect();
    let no_interaction = verbs.iter().position(|v| v.is_no_interaction).unwrap();

    // The UV verbs come from the same seeded draw `make-split` performs.
    let scratch = LabelSpace::new(
        objects.clone(),
        verbs.clone(),
        (0..VERBS.len()).map(|v| TripletRecord { id: v, verb_id: v, object_id: 0 }).collect(),
    )
    .unwrap();
    let uv = choose_random_verbs(&scratch, 20, UV_SEED).unwrap();
    let uo: Vec<usize> = UO_OBJECTS.iter().map(|n| OBJECTS.iter().position(|o| o == n).unwrap()).collect();

    // Every object pairs with no_interaction; the remaining 520 interacting
    // triplets carry the UO and UV cardinalities.
    let interacting = N_TRIPLETS - OBJECTS.len();
    let uo_rest = UO_TRIPLETS - uo.len();
    let seen_objs: Vec<usize> = (0..OBJECTS.len()).filter(|o| !uo.contains(o)).collect();
    let other_verbs: Vec<usize> = (0..VERBS.len()).filter(|v| *v != no_interaction && !uv.contains(v)).collect();

    let pairs = loop {
        let vd: Vec<(usize, usize)> = uv
            .iter()
            .copied()
            .zip(degrees(UV_TRIPLETS, uv.len(), &mut rng))
            .chain(other_verbs.iter().copied().zip(degrees(interacting - UV_TRIPLETS, other_verbs.len(), &mut rng)))
            .collect();
        let od: Vec<(usize, usize)> = uo
            .iter()
            .copied()
            .zip(degrees(uo_rest, uo.len(), &mut rng))
            .chain(seen_objs.iter().copied().zip(degrees(interacting - uo_rest, seen_objs.len(), &mut rng)))
            .collect();
        if vd.iter().any(|&(_, d)| d > OBJECTS.len()) {
            continue;
        }
        if let Some(p) = pair_up(&vd, &od, &mut rng) {
            if p.len() == interacting {
                break p;
            }
        }
    };

    let mut all: Vec<(usize, usize)> = pairs;
    all.extend((0..OBJECTS.len()).map(|o| (no_interaction, o)));
    // Triplet ids ordered by object, then verb.
    all.sort_by_key(|&(v, o)| (o, v));
    let triplets: Vec<TripletRecord> =
        all.iter().enumerate().map(|(id, &(verb_id, object_id))| TripletRecord { id, verb_id, object_id }).collect();

    // Long-tailed counts: exactly N_RARE entries below 10.
    let mut counts: Vec<u64> = (0..N_TRIPLETS)
        .map(|r| {
            if r < N_RARE {
                rng.gen_range(1..10)
            } else {
                let rank = (N_TRIPLETS - r) as f64;
                (10.0 + 6000.0 * rank.powf(-1.3) * (0.5 + rng.gen::<f64>())).round() as u64
            }
        })
        .collect();
    counts.shuffle(&mut rng);

    let ls = LabelSpace::new(objects, verbs, triplets).unwrap();
    let mut file = ls.to_file(Some(counts));
    file.uo_objects = Some(uo);
    file.uv_verbs = Some(uv);
    file.note = Some(format!(
        "Object and verb names follow HICO-Det. Verb-object pairings and train_counts are a seeded \
         reconstruction (seed {SEED}) matching the published cardinalities, not the original annotation \
         list. uv_verbs is one draw of 20 interacting verbs (seed {UV_SEED}) and is not canonical."
    ));
    let json = serde_json::to_string_pretty(&file).unwrap();
    std::fs::write(&out, json + "\n").unwrap();
    println!("wrote {}", out.display());
}
