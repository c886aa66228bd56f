//! HOI taxonomy: objects, verbs, `<verb, object>` triplets, and the
//! partitions derived from them (rare / non-rare, seen / unseen).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};

/// Categories with fewer training instances than this are rare.
pub const RARE_THRESHOLD: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Article {
    A,
    An,
}

impl fmt::Display for Article {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Article::A => "a",
            Article::An => "an",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub name: String,
    pub article: Article,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbRecord {
    pub id: usize,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gerund: Option<String>,
    #[serde(default)]
    pub is_no_interaction: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: usize,
    pub verb_id: usize,
    pub object_id: usize,
}

/// A validated taxonomy. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    objects: Vec<ObjectRecord>,
    verbs: Vec<VerbRecord>,
    triplets: Vec<TripletRecord>,
    expansion_map: Vec<usize>,
    by_pair: HashMap<(usize, usize), usize>,
}

fn check_dense_ids<T>(kind: &str, items: &[T], id: impl Fn(&T) -> usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::LabelSpace(format!("{kind} list is empty")));
    }
    for (i, item) in items.iter().enumerate() {
        if id(item) != i {
            return Err(Error::LabelSpace(format!("{kind} at position {i} has id {}, expected {i}", id(item))));
        }
    }
    Ok(())
}

fn check_unique_names<'a>(kind: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::LabelSpace(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}

impl LabelSpace {
    /// Validates the three lists and builds the triplet index maps.
    ///
    /// Ids must be dense (`id == position`), names unique within each list,
    /// `(verb, object)` pairs unique, and every referenced id must exist.
    pub fn new(objects: Vec<ObjectRecord>, verbs: Vec<VerbRecord>, triplets: Vec<TripletRecord>) -> Result<Self> {
        check_dense_ids("object", &objects, |o| o.id)?;
        check_dense_ids("verb", &verbs, |v| v.id)?;
        check_dense_ids("triplet", &triplets, |t| t.id)?;
        check_unique_names("object", objects.iter().map(|o| o.name.as_str()))?;
        check_unique_names("verb", verbs.iter().map(|v| v.name.as_str()))?;

        let mut by_pair = HashMap::new();
        for t in &triplets {
            if t.verb_id >= verbs.len() {
                return Err(Error::LabelSpace(format!(
                    "triplet {} references verb_id {} but only {} verbs exist",
                    t.id,
                    t.verb_id,
                    verbs.len()
                )));
            }
            if t.object_id >= objects.len() {
                return Err(Error::LabelSpace(format!(
                    "triplet {} references object_id {} but only {} objects exist",
                    t.id,
                    t.object_id,
                    objects.len()
                )));
            }
            if let Some(prev) = by_pair.insert((t.verb_id, t.object_id), t.id) {
                return Err(Error::LabelSpace(format!(
                    "triplets {prev} and {} both map to ({}, {})",
                    t.id, verbs[t.verb_id].name, objects[t.object_id].name
                )));
            }
        }
        let expansion_map = triplets.iter().map(|t| t.object_id).collect();
        Ok(LabelSpace { objects, verbs, triplets, expansion_map, by_pair })
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Vec<u64>>)> {
        let file: LabelSpaceFile = read_json(path)?;
        let counts = file.train_counts.clone();
        let ls = LabelSpace::new(file.objects, file.verbs, file.triplets)?;
        if let Some(c) = &counts {
            if c.len() != ls.num_triplets() {
                return Err(Error::LabelSpace(format!(
                    "train_counts has {} entries for {} triplets",
                    c.len(),
                    ls.num_triplets()
                )));
            }
        }
        Ok((ls, counts))
    }

    pub fn to_file(&self, train_counts: Option<Vec<u64>>) -> LabelSpaceFile {
        LabelSpaceFile {
            objects: self.objects.clone(),
            verbs: self.verbs.clone(),
            triplets: self.triplets.clone(),
            train_counts,
            ..Default::default()
        }
    }

    pub fn save(&self, path: &Path, train_counts: Option<Vec<u64>>) -> Result<()> {
        write_json(path, &self.to_file(train_counts))
    }

    pub fn objects(&self) -> &[ObjectRecord] {
        &self.objects
    }

    pub fn verbs(&self) -> &[VerbRecord] {
        &self.verbs
    }

    pub fn triplets(&self) -> &[TripletRecord] {
        &self.triplets
    }

    /// `N_o`.
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// `N_a`.
    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    /// Object id of every triplet, indexed by triplet id.
    pub fn expansion_map(&self) -> &[usize] {
        &self.expansion_map
    }

    pub fn triplet_id(&self, verb_id: usize, object_id: usize) -> Option<usize> {
        self.by_pair.get(&(verb_id, object_id)).copied()
    }

    pub fn object_of(&self, hoi: usize) -> usize {
        self.triplets[hoi].object_id
    }

    pub fn verb_of(&self, hoi: usize) -> usize {
        self.triplets[hoi].verb_id
    }

    pub fn object_by_name(&self, name: &str) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn verb_by_name(&self, name: &str) -> Option<&VerbRecord> {
        self.verbs.iter().find(|v| v.name == name)
    }

    /// Copies each object's score to every triplet that uses the object.
    pub fn expand_object_scores(&self, object_scores: &[f64]) -> Result<Vec<f64>> {
        if object_scores.len() != self.num_objects() {
            return Err(Error::Shape(format!(
                "expected {} object scores, got {}",
                self.num_objects(),
                object_scores.len()
            )));
        }
        Ok(self.expansion_map.iter().map(|&o| object_scores[o]).collect())
    }
}

/// On-disk label-space schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaceFile {
    pub objects: Vec<ObjectRecord>,
    pub verbs: Vec<VerbRecord>,
    pub triplets: Vec<TripletRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_counts: Option<Vec<u64>>,
    /// Object ids of the unseen-object split shipped with the fixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uo_objects: Option<Vec<usize>>,
    /// Verb ids of the unseen-verb split shipped with the fixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uv_verbs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// `rare = {h : counts[h] < 10}`, `non_rare` the complement.
pub fn rare_split(train_counts: &[u64]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut rare = BTreeSet::new();
    let mut non_rare = BTreeSet::new();
    for (h, &c) in train_counts.iter().enumerate() {
        if c < RARE_THRESHOLD {
            rare.insert(h);
        } else {
            non_rare.insert(h);
        }
    }
    (rare, non_rare)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZeroShotSetting {
    #[serde(rename = "RF-UC")]
    RareFirst,
    #[serde(rename = "NF-UC")]
    NonRareFirst,
    #[serde(rename = "UO")]
    UnseenObject,
    #[serde(rename = "UV")]
    UnseenVerb,
}

impl std::str::FromStr for ZeroShotSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RF-UC" | "RFUC" => Ok(ZeroShotSetting::RareFirst),
            "NF-UC" | "NFUC" => Ok(ZeroShotSetting::NonRareFirst),
            "UO" => Ok(ZeroShotSetting::UnseenObject),
            "UV" => Ok(ZeroShotSetting::UnseenVerb),
            other => Err(Error::Split(format!("unknown zero-shot setting {other:?}"))),
        }
    }
}

/// What to hold out for a zero-shot split.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitRequest {
    /// The `n` lowest-count triplets.
    RareFirst { n_unseen: usize },
    /// The `n` highest-count triplets.
    NonRareFirst { n_unseen: usize },
    /// Every triplet whose object is listed.
    UnseenObjects(Vec<usize>),
    /// Every triplet whose verb is listed.
    UnseenVerbs(Vec<usize>),
    /// `count` interacting verbs drawn with a seeded shuffle, then as `UnseenVerbs`.
    RandomVerbs { count: usize, seed: u64 },
}

impl SplitRequest {
    pub fn setting(&self) -> ZeroShotSetting {
        match self {
            SplitRequest::RareFirst { .. } => ZeroShotSetting::RareFirst,
            SplitRequest::NonRareFirst { .. } => ZeroShotSetting::NonRareFirst,
            SplitRequest::UnseenObjects(_) => ZeroShotSetting::UnseenObject,
            SplitRequest::UnseenVerbs(_) | SplitRequest::RandomVerbs { .. } => ZeroShotSetting::UnseenVerb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: ZeroShotSetting,
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
    #[serde(default)]
    pub rare: BTreeSet<usize>,
    #[serde(default)]
    pub non_rare: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn is_seen(&self, hoi: usize) -> bool {
        self.seen.contains(&hoi)
    }

    /// Checks that seen/unseen and rare/non-rare both partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let check = |a: &BTreeSet<usize>, b: &BTreeSet<usize>, what: &str| -> Result<()> {
            if a.len() + b.len() != n || a.iter().chain(b.iter()).any(|&h| h >= n) || a.intersection(b).next().is_some()
            {
                return Err(Error::Split(format!("{what} do not partition {n} triplets")));
            }
            Ok(())
        };
        check(&self.seen, &self.unseen, "seen/unseen")?;
        if !(self.rare.is_empty() && self.non_rare.is_empty()) {
            check(&self.rare, &self.non_rare, "rare/non_rare")?;
        }
        Ok(())
    }
}

/// Draws `count` interacting verbs with a seeded shuffle, returned sorted.
pub fn choose_random_verbs(ls: &LabelSpace, count: usize, seed: u64) -> Result<Vec<usize>> {
    let mut pool: Vec<usize> = ls.verbs().iter().filter(|v| !v.is_no_interaction).map(|v| v.id).collect();
    if count > pool.len() {
        return Err(Error::Split(format!("requested {count} verbs but only {} interacting verbs exist", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Builds a zero-shot split. Ties in the count ordering break by ascending id.
pub fn make_zero_shot_split(ls: &LabelSpace, request: &SplitRequest, train_counts: &[u64]) -> Result<SplitSpec> {
    let n = ls.num_triplets();
    if train_counts.len() != n {
        return Err(Error::Split(format!("train_counts has {} entries for {n} triplets", train_counts.len())));
    }
    let unseen: BTreeSet<usize> = match request {
        SplitRequest::RareFirst { n_unseen } | SplitRequest::NonRareFirst { n_unseen } => {
            if *n_unseen > n {
                return Err(Error::Split(format!("requested {n_unseen} unseen triplets but N_a = {n}")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            if matches!(request, SplitRequest::RareFirst { .. }) {
                order.sort_by_key(|&h| (train_counts[h], h));
            } else {
                order.sort_by_key(|&h| (std::cmp::Reverse(train_counts[h]), h));
            }
            order.into_iter().take(*n_unseen).collect()
        }
        SplitRequest::UnseenObjects(objs) => {
            for &o in objs {
                if o >= ls.num_objects() {
                    return Err(Error::Split(format!("unseen object id {o} not in label space")));
                }
            }
            let set: HashSet<usize> = objs.iter().copied().collect();
            (0..n).filter(|&h| set.contains(&ls.object_of(h))).collect()
        }
        SplitRequest::UnseenVerbs(verbs) => {
            for &v in verbs {
                if v >= ls.num_verbs() {
                    return Err(Error::Split(format!("unseen verb id {v} not in label space")));
                }
            }
            let set: HashSet<usize> = verbs.iter().copied().collect();
            (0..n).filter(|&h| set.contains(&ls.verb_of(h))).collect()
        }
        SplitRequest::RandomVerbs { count, seed } => {
            let verbs = choose_random_verbs(ls, *count, *seed)?;
            return make_zero_shot_split(ls, &SplitRequest::UnseenVerbs(verbs), train_counts);
        }
    };
    let seen = (0..n).filter(|h| !unseen.contains(h)).collect();
    let (rare, non_rare) = rare_split(train_counts);
    Ok(SplitSpec { setting: request.setting(), seen, unseen, rare, non_rare })
}
