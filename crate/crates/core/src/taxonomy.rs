//! Hierarchical attribute criteria.
//!
//! An [`AttributeTree`] groups leaf attribute pairs (a positive and a negative
//! label for one quality) under root dimensions and sub-dimensions. Which
//! pairs apply to a sample depends on its family, and sibling pairs under the
//! same parent may be declared mutually exclusive.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum nesting supported by the criteria format.
pub const MAX_DEPTH: usize = 5;
pub const MIN_DEPTH: usize = 2;

/// Content family of a sample. Plays the role of the content prompt `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "RING")]
    Ring,
    #[serde(rename = "GRID")]
    Grid,
}

impl Family {
    /// Registry order; fixes the family slots of the condition vector.
    pub const ALL: [Family; 2] = [Family::Ring, Family::Grid];

    pub fn id(self) -> &'static str {
        match self {
            Family::Ring => "RING",
            Family::Grid => "GRID",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEG")]
    Neg,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neg => "NEG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafPair {
    pub pair_id: String,
    pub pos_label: String,
    pub neg_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusivity_group: Option<String>,
    pub applicability_predicate_id: String,
}

/// A node of the criteria tree. Interior nodes carry `children`; leaves carry
/// `pair` and use the pair id as their node id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionNode {
    pub id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<DimensionNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<LeafPair>,
}

impl DimensionNode {
    pub fn dimension(id: &str, children: Vec<DimensionNode>) -> Self {
        Self {
            id: id.to_string(),
            children,
            pair: None,
        }
    }

    pub fn leaf(pair: LeafPair) -> Self {
        Self {
            id: pair.pair_id.clone(),
            children: Vec::new(),
            pair: Some(pair),
        }
    }

    fn depth(&self) -> usize {
        1 + self.children.iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    fn canonicalize(&mut self) {
        self.children.sort_by(|a, b| a.id.cmp(&b.id));
        for c in &mut self.children {
            c.canonicalize();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTree {
    pub depth_limit: usize,
    pub roots: Vec<DimensionNode>,
}

/// A leaf together with its ancestry, as produced by [`AttributeTree::leaves`].
#[derive(Debug, Clone)]
pub struct LeafRef<'a> {
    pub path: Vec<&'a str>,
    pub pair: &'a LeafPair,
}

impl LeafRef<'_> {
    /// Id of the leaf's parent node, the scope of sibling exclusivity.
    pub fn parent(&self) -> Option<&str> {
        self.path.len().checked_sub(2).map(|i| self.path[i])
    }
}

impl AttributeTree {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn depth(&self) -> usize {
        self.roots.iter().map(|r| r.depth()).max().unwrap_or(0)
    }

    /// Same tree with siblings sorted by id at every level.
    pub fn canonical(&self) -> Self {
        let mut t = self.clone();
        t.roots.sort_by(|a, b| a.id.cmp(&b.id));
        for r in &mut t.roots {
            r.canonicalize();
        }
        t
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("tree serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Leaves in canonical order: depth-first, siblings sorted by id.
    pub fn leaves(&self) -> Vec<LeafRef<'_>> {
        fn walk<'a>(
            nodes: &'a [DimensionNode],
            path: &mut Vec<&'a str>,
            out: &mut Vec<LeafRef<'a>>,
        ) {
            let mut order: Vec<&DimensionNode> = nodes.iter().collect();
            order.sort_by(|a, b| a.id.cmp(&b.id));
            for node in order {
                path.push(&node.id);
                if let Some(pair) = &node.pair {
                    out.push(LeafRef {
                        path: path.clone(),
                        pair,
                    });
                }
                walk(&node.children, path, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        walk(&self.roots, &mut Vec::new(), &mut out);
        out
    }

    pub fn pair(&self, pair_id: &str) -> Option<&LeafPair> {
        self.leaves()
            .into_iter()
            .find(|l| l.pair.pair_id == pair_id)
            .map(|l| l.pair)
    }
}

/// The desk-scale criteria: two roots, three levels, four pairs.
pub fn default_tree() -> AttributeTree {
    let pair = |id: &str, pos: &str, neg: &str, group: Option<&str>, pred: &str| {
        DimensionNode::leaf(LeafPair {
            pair_id: id.to_string(),
            pos_label: pos.to_string(),
            neg_label: neg.to_string(),
            exclusivity_group: group.map(str::to_string),
            applicability_predicate_id: pred.to_string(),
        })
    };
    AttributeTree {
        depth_limit: 3,
        roots: vec![
            DimensionNode::dimension(
                "Layout",
                vec![
                    DimensionNode::dimension(
                        "Shape",
                        vec![
                            pair(
                                "RING_CLOSURE",
                                "closed ring",
                                "ring with gap",
                                Some("Shape"),
                                "family:RING",
                            ),
                            pair(
                                "GRID_REGULARITY",
                                "regular grid",
                                "jittered grid",
                                Some("Shape"),
                                "family:GRID",
                            ),
                        ],
                    ),
                    DimensionNode::dimension(
                        "Balance",
                        vec![pair(
                            "CENTER_BALANCE",
                            "centered mass",
                            "off-center mass",
                            None,
                            "all",
                        )],
                    ),
                ],
            ),
            DimensionNode::dimension(
                "Spread",
                vec![DimensionNode::dimension(
                    "Scale",
                    vec![pair(
                        "SPREAD_SCALE",
                        "target dispersion",
                        "mis-dispersed",
                        None,
                        "all",
                    )],
                )],
            ),
        ],
    }
}

/// Applicability rule referenced by `applicability_predicate_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applicability {
    All,
    Only(Family),
}

impl Applicability {
    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "all" => Some(Applicability::All),
            _ => id
                .strip_prefix("family:")
                .and_then(|f| f.parse().ok())
                .map(Applicability::Only),
        }
    }

    pub fn accepts(self, family: Family) -> bool {
        match self {
            Applicability::All => true,
            Applicability::Only(f) => f == family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateId(String),
    DepthLimit { depth: usize, limit: usize },
    TooShallow { depth: usize },
    BadDepthLimit(usize),
    InteriorHoldsAttributes,
    EmptyDimension,
    LeafAtRoot,
    LeafIdMismatch { node_id: String },
    SameLabels,
    ExclusivityGroup { group: String, expected: String },
    UnknownPredicate(String),
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::DuplicateId(id) => write!(f, "duplicate id `{id}`"),
            ViolationKind::DepthLimit { depth, limit } => {
                write!(f, "depth limit: depth {depth} exceeds limit {limit}")
            }
            ViolationKind::TooShallow { depth } => {
                write!(f, "depth limit: depth {depth} below minimum {MIN_DEPTH}")
            }
            ViolationKind::BadDepthLimit(l) => {
                write!(f, "depth limit {l} outside [{MIN_DEPTH}, {MAX_DEPTH}]")
            }
            ViolationKind::InteriorHoldsAttributes => {
                write!(f, "interior node holds attributes")
            }
            ViolationKind::EmptyDimension => write!(f, "dimension has no children"),
            ViolationKind::LeafAtRoot => write!(f, "leaf pair at root level"),
            ViolationKind::LeafIdMismatch { node_id } => {
                write!(f, "leaf node id `{node_id}` differs from its pair id")
            }
            ViolationKind::SameLabels => write!(f, "positive and negative labels are equal"),
            ViolationKind::ExclusivityGroup { group, expected } => write!(
                f,
                "exclusivity group `{group}` is not the parent dimension `{expected}`"
            ),
            ViolationKind::UnknownPredicate(p) => {
                write!(f, "unknown applicability predicate `{p}`")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Slash-joined node ids from the root.
    pub path: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every structural invariant of the tree. Violations are collected,
/// never raised.
pub fn validate_tree(tree: &AttributeTree) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen: HashMap<&str, String> = HashMap::new();

    if !(MIN_DEPTH..=MAX_DEPTH).contains(&tree.depth_limit) {
        violations.push(Violation {
            path: String::new(),
            kind: ViolationKind::BadDepthLimit(tree.depth_limit),
        });
    }
    let depth = tree.depth();
    let limit = tree.depth_limit.min(MAX_DEPTH);
    if depth > limit {
        violations.push(Violation {
            path: String::new(),
            kind: ViolationKind::DepthLimit { depth, limit },
        });
    }
    if depth < MIN_DEPTH {
        violations.push(Violation {
            path: String::new(),
            kind: ViolationKind::TooShallow { depth },
        });
    }

    fn walk<'a>(
        nodes: &'a [DimensionNode],
        path: &mut Vec<&'a str>,
        seen: &mut HashMap<&'a str, String>,
        out: &mut Vec<Violation>,
    ) {
        for node in nodes {
            path.push(&node.id);
            let here = path.join("/");
            let mut push = |kind| {
                out.push(Violation {
                    path: here.clone(),
                    kind,
                })
            };
            if seen.insert(&node.id, here.clone()).is_some() {
                push(ViolationKind::DuplicateId(node.id.clone()));
            }
            match (&node.pair, node.children.is_empty()) {
                (Some(_), false) => push(ViolationKind::InteriorHoldsAttributes),
                (None, true) => push(ViolationKind::EmptyDimension),
                _ => {}
            }
            if let Some(pair) = &node.pair {
                if path.len() < 2 {
                    push(ViolationKind::LeafAtRoot);
                }
                if pair.pair_id != node.id {
                    push(ViolationKind::LeafIdMismatch {
                        node_id: node.id.clone(),
                    });
                }
                if pair.pos_label == pair.neg_label {
                    push(ViolationKind::SameLabels);
                }
                if let Some(group) = &pair.exclusivity_group {
                    let parent = path.len().checked_sub(2).map(|i| path[i]).unwrap_or("");
                    if group != parent {
                        push(ViolationKind::ExclusivityGroup {
                            group: group.clone(),
                            expected: parent.to_string(),
                        });
                    }
                }
                if Applicability::parse(&pair.applicability_predicate_id).is_none() {
                    push(ViolationKind::UnknownPredicate(
                        pair.applicability_predicate_id.clone(),
                    ));
                }
            }
            walk(&node.children, path, seen, out);
            path.pop();
        }
    }
    walk(&tree.roots, &mut Vec::new(), &mut seen, &mut violations);
    ValidationReport { violations }
}

/// Pairs whose applicability predicate accepts `family`.
pub fn applicable_pairs(tree: &AttributeTree, family: Family) -> BTreeSet<String> {
    tree.leaves()
        .into_iter()
        .filter(|l| {
            Applicability::parse(&l.pair.applicability_predicate_id)
                .is_some_and(|a| a.accepts(family))
        })
        .map(|l| l.pair.pair_id.clone())
        .collect()
}

/// [`applicable_pairs`] keyed by a family id string.
pub fn applicable_pairs_for(tree: &AttributeTree, family: &str) -> Result<BTreeSet<String>> {
    Ok(applicable_pairs(tree, family.parse()?))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Attribute {
    pub pair_id: String,
    pub polarity: Polarity,
}

/// Ordered set of `(pair_id, polarity)` entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AttributeSet {
    entries: BTreeSet<Attribute>,
}

impl AttributeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_polarity<I, S>(polarity: Polarity, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: ids
                .into_iter()
                .map(|id| Attribute {
                    pair_id: id.into(),
                    polarity,
                })
                .collect(),
        }
    }

    pub fn pos<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_polarity(Polarity::Pos, ids)
    }

    pub fn neg<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_polarity(Polarity::Neg, ids)
    }

    pub fn insert(&mut self, pair_id: impl Into<String>, polarity: Polarity) -> bool {
        self.entries.insert(Attribute {
            pair_id: pair_id.into(),
            polarity,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.entries.iter()
    }

    pub fn contains(&self, pair_id: &str, polarity: Polarity) -> bool {
        self.entries.contains(&Attribute {
            pair_id: pair_id.to_string(),
            polarity,
        })
    }

    pub fn contains_pair(&self, pair_id: &str) -> bool {
        self.entries.iter().any(|a| a.pair_id == pair_id)
    }

    pub fn pair_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|a| a.pair_id.as_str())
    }

    pub fn intersection_len(&self, other: &AttributeSet) -> usize {
        self.entries.intersection(&other.entries).count()
    }

    pub fn union_len(&self, other: &AttributeSet) -> usize {
        self.entries.union(&other.entries).count()
    }
}

impl FromIterator<Attribute> for AttributeSet {
    fn from_iter<T: IntoIterator<Item = Attribute>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusivityConflict {
    pub group: String,
    pub first: String,
    pub second: String,
}

/// Lists every two positive entries whose pairs share an exclusivity group.
/// An empty list means the set is consistent.
pub fn check_exclusivity(
    tree: &AttributeTree,
    set: &AttributeSet,
) -> Result<Vec<ExclusivityConflict>> {
    let mut groups: Vec<(&str, Option<&str>)> = Vec::new();
    for a in set.iter() {
        let pair = tree
            .pair(&a.pair_id)
            .ok_or_else(|| Error::UnknownPair(a.pair_id.clone()))?;
        if a.polarity == Polarity::Pos {
            groups.push((&a.pair_id, pair.exclusivity_group.as_deref()));
        }
    }
    let mut conflicts = Vec::new();
    for (i, (first, g1)) in groups.iter().enumerate() {
        for (second, g2) in &groups[i + 1..] {
            if let (Some(g1), Some(g2)) = (g1, g2) {
                if g1 == g2 && first != second {
                    conflicts.push(ExclusivityConflict {
                        group: g1.to_string(),
                        first: first.to_string(),
                        second: second.to_string(),
                    });
                }
            }
        }
    }
    Ok(conflicts)
}

/// Fixed-width multi-hot layout of a condition `(y, A_pos, A_neg)`:
/// `[family one-hot | pos slots | neg slots]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionVocabulary {
    families: Vec<Family>,
    pairs: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ConditionVocabulary {
    pub fn from_tree(tree: &AttributeTree) -> Self {
        let pairs: Vec<String> = tree
            .leaves()
            .into_iter()
            .map(|l| l.pair.pair_id.clone())
            .collect();
        let index = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            families: Family::ALL.to_vec(),
            pairs,
            index,
        }
    }

    pub fn family_slots(&self) -> usize {
        self.families.len()
    }

    pub fn pair_slots(&self) -> usize {
        self.pairs.len()
    }

    pub fn width(&self) -> usize {
        self.family_slots() + 2 * self.pair_slots()
    }

    pub fn pairs(&self) -> &[String] {
        &self.pairs
    }

    pub fn family_block(&self) -> std::ops::Range<usize> {
        0..self.family_slots()
    }

    pub fn pos_block(&self) -> std::ops::Range<usize> {
        let f = self.family_slots();
        f..f + self.pair_slots()
    }

    pub fn neg_block(&self) -> std::ops::Range<usize> {
        let s = self.family_slots() + self.pair_slots();
        s..s + self.pair_slots()
    }

    pub fn family_index(&self, family: Family) -> usize {
        self.families
            .iter()
            .position(|&f| f == family)
            .expect("registry family")
    }

    /// `(pos index, neg index)` of a pair.
    pub fn pair_indices(&self, pair_id: &str) -> Result<(usize, usize)> {
        let i = *self
            .index
            .get(pair_id)
            .ok_or_else(|| Error::UnknownPair(pair_id.to_string()))?;
        Ok((self.pos_block().start + i, self.neg_block().start + i))
    }

    /// Encode a condition. `None` leaves the corresponding block at zero, so
    /// `encode(None, None, None)` is the null condition.
    pub fn encode(
        &self,
        y: Option<Family>,
        a_pos: Option<&AttributeSet>,
        a_neg: Option<&AttributeSet>,
    ) -> Result<Vec<f64>> {
        let mut c = vec![0.0; self.width()];
        if let Some(f) = y {
            c[self.family_index(f)] = 1.0;
        }
        for (set, polarity) in [(a_pos, Polarity::Pos), (a_neg, Polarity::Neg)] {
            let Some(set) = set else { continue };
            for a in set.iter() {
                if a.polarity != polarity {
                    return Err(Error::PolarityMismatch {
                        pair_id: a.pair_id.clone(),
                        expected: polarity.as_str(),
                        found: a.polarity.as_str(),
                    });
                }
                let (p, n) = self.pair_indices(&a.pair_id)?;
                c[if polarity == Polarity::Pos { p } else { n }] = 1.0;
            }
        }
        Ok(c)
    }

    pub fn null(&self) -> Vec<f64> {
        vec![0.0; self.width()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(s: &BTreeSet<String>) -> Vec<&str> {
        s.iter().map(String::as_str).collect()
    }

    #[test]
    fn default_tree_is_valid() {
        let t = default_tree();
        let report = validate_tree(&t);
        assert!(report.is_ok(), "{:?}", report.violations);
        assert_eq!(t.depth(), 3);
    }

    #[test]
    fn duplicate_pair_id_is_reported() {
        let mut t = default_tree();
        let dup = DimensionNode::leaf(LeafPair {
            pair_id: "RING".into(),
            pos_label: "a".into(),
            neg_label: "b".into(),
            exclusivity_group: None,
            applicability_predicate_id: "all".into(),
        });
        t.roots[1].children[0].children.push(dup.clone());
        t.roots[0].children[1].children.push(dup);
        let report = validate_tree(&t);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(&v.kind, ViolationKind::DuplicateId(id) if id == "RING")));
        assert!(report.violations[0].to_string().contains("duplicate id"));
    }

    #[test]
    fn depth_six_exceeds_limit() {
        let mut node = DimensionNode::leaf(LeafPair {
            pair_id: "DEEP".into(),
            pos_label: "p".into(),
            neg_label: "n".into(),
            exclusivity_group: None,
            applicability_predicate_id: "all".into(),
        });
        for i in (1..6).rev() {
            node = DimensionNode::dimension(&format!("L{i}"), vec![node]);
        }
        let t = AttributeTree {
            depth_limit: 5,
            roots: vec![node],
        };
        assert_eq!(t.depth(), 6);
        let report = validate_tree(&t);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind.to_string().starts_with("depth limit")));
    }

    #[test]
    fn structural_violations() {
        let mut t = default_tree();
        // interior node that also carries a pair
        t.roots[1].pair = Some(LeafPair {
            pair_id: "Spread".into(),
            pos_label: "x".into(),
            neg_label: "x".into(),
            exclusivity_group: Some("Nope".into()),
            applicability_predicate_id: "family:BLOB".into(),
        });
        let kinds: Vec<ViolationKind> = validate_tree(&t)
            .violations
            .into_iter()
            .map(|v| v.kind)
            .collect();
        assert!(kinds.contains(&ViolationKind::InteriorHoldsAttributes));
        assert!(kinds.contains(&ViolationKind::LeafAtRoot));
        assert!(kinds.contains(&ViolationKind::SameLabels));
        assert!(kinds.contains(&ViolationKind::UnknownPredicate("family:BLOB".into())));
        assert!(kinds
            .iter()
            .any(|k| matches!(k, ViolationKind::ExclusivityGroup { .. })));
    }

    #[test]
    fn applicability_is_family_dependent() {
        let t = default_tree();
        assert_eq!(
            ids(&applicable_pairs(&t, Family::Ring)),
            ["CENTER_BALANCE", "RING_CLOSURE", "SPREAD_SCALE"]
        );
        assert_eq!(
            ids(&applicable_pairs(&t, Family::Grid)),
            ["CENTER_BALANCE", "GRID_REGULARITY", "SPREAD_SCALE"]
        );
        assert!(matches!(
            applicable_pairs_for(&t, "BLOB"),
            Err(Error::UnknownFamily(f)) if f == "BLOB"
        ));
    }

    #[test]
    fn exclusivity() {
        let t = default_tree();
        assert!(check_exclusivity(&t, &AttributeSet::pos(["RING_CLOSURE"]))
            .unwrap()
            .is_empty());
        let c =
            check_exclusivity(&t, &AttributeSet::pos(["RING_CLOSURE", "GRID_REGULARITY"])).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].group, "Shape");
        assert!(
            check_exclusivity(&t, &AttributeSet::pos(["RING_CLOSURE", "CENTER_BALANCE"]))
                .unwrap()
                .is_empty()
        );
        // negative entries never conflict
        assert!(
            check_exclusivity(&t, &AttributeSet::neg(["RING_CLOSURE", "GRID_REGULARITY"]))
                .unwrap()
                .is_empty()
        );
        assert!(matches!(
            check_exclusivity(&t, &AttributeSet::pos(["NOPE"])),
            Err(Error::UnknownPair(_))
        ));
    }

    #[test]
    fn vocabulary_layout() {
        let v = ConditionVocabulary::from_tree(&default_tree());
        assert_eq!(v.width(), 2 + 2 * 4);
        assert_eq!(
            v.pairs(),
            [
                "CENTER_BALANCE",
                "GRID_REGULARITY",
                "RING_CLOSURE",
                "SPREAD_SCALE"
            ]
        );
        let mut all: Vec<usize> = v
            .pairs()
            .iter()
            .flat_map(|p| {
                let (a, b) = v.pair_indices(p).unwrap();
                [a, b]
            })
            .collect();
        all.sort();
        assert_eq!(all, (2..10).collect::<Vec<_>>());
    }

    #[test]
    fn encode_examples() {
        let v = ConditionVocabulary::from_tree(&default_tree());
        assert_eq!(v.encode(None, None, None).unwrap(), v.null());
        assert!(v.null().iter().all(|&x| x == 0.0));

        let pos = AttributeSet::pos(["RING_CLOSURE"]);
        let c = v.encode(Some(Family::Ring), Some(&pos), None).unwrap();
        assert_eq!(c[v.family_block()].iter().sum::<f64>(), 1.0);
        assert_eq!(c[v.family_index(Family::Ring)], 1.0);
        assert_eq!(c[v.pos_block()].iter().sum::<f64>(), 1.0);
        assert_eq!(c[v.neg_block()].iter().sum::<f64>(), 0.0);

        let neg = AttributeSet::neg(["SPREAD_SCALE", "CENTER_BALANCE"]);
        let full = v
            .encode(Some(Family::Ring), Some(&pos), Some(&neg))
            .unwrap();
        let a = v.encode(Some(Family::Ring), Some(&pos), None).unwrap();
        let b = v.encode(None, None, Some(&neg)).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(full, sum);

        assert!(matches!(
            v.encode(None, Some(&AttributeSet::pos(["NOPE"])), None),
            Err(Error::UnknownPair(_))
        ));
        assert!(matches!(
            v.encode(None, Some(&neg), None),
            Err(Error::PolarityMismatch { .. })
        ));
    }

    #[test]
    fn json_round_trip_keeps_index_map() {
        let t = default_tree();
        let back = AttributeTree::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(
            ConditionVocabulary::from_tree(&back),
            ConditionVocabulary::from_tree(&t)
        );
        assert_eq!(back.content_hash(), t.content_hash());
    }

    fn shuffled(t: &AttributeTree, seed: u64) -> AttributeTree {
        fn rot(nodes: &mut [DimensionNode], s: &mut u64) {
            if !nodes.is_empty() {
                *s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let k = (*s >> 33) as usize % nodes.len();
                nodes.rotate_left(k);
            }
            for n in nodes.iter_mut() {
                rot(&mut n.children, s);
            }
        }
        let mut t = t.clone();
        let mut s = seed;
        rot(&mut t.roots, &mut s);
        t
    }

    fn all_triples(v: &ConditionVocabulary, t: &AttributeTree) -> Vec<Vec<f64>> {
        // every (y, A_pos, A_neg) with A_pos, A_neg disjoint subsets of one
        // family's applicable pairs, plus the null-family variants
        let mut out = Vec::new();
        for y in [None, Some(Family::Ring), Some(Family::Grid)] {
            let fam = y.unwrap_or(Family::Ring);
            let app: Vec<String> = applicable_pairs(t, fam).into_iter().collect();
            let n = app.len();
            for assign in 0..3usize.pow(n as u32) {
                let mut pos = AttributeSet::new();
                let mut neg = AttributeSet::new();
                let mut a = assign;
                for p in &app {
                    match a % 3 {
                        1 => {
                            pos.insert(p.clone(), Polarity::Pos);
                        }
                        2 => {
                            neg.insert(p.clone(), Polarity::Neg);
                        }
                        _ => {}
                    }
                    a /= 3;
                }
                out.push(v.encode(y, Some(&pos), Some(&neg)).unwrap());
            }
        }
        out
    }

    #[test]
    fn encoding_is_injective_over_valid_triples() {
        let t = default_tree();
        let v = ConditionVocabulary::from_tree(&t);
        let codes = all_triples(&v, &t);
        let mut seen = std::collections::HashSet::new();
        for c in &codes {
            let key: Vec<u8> = c.iter().map(|&x| x as u8).collect();
            seen.insert(key);
        }
        // RING-derived triples repeat for y = None and y = RING only via the family slot,
        // so distinct codes equal distinct (y, pos, neg) triples.
        assert_eq!(seen.len(), codes.len());
    }

    proptest! {
        #[test]
        fn sibling_order_does_not_change_vocabulary(seed in any::<u64>()) {
            let t = default_tree();
            let s = shuffled(&t, seed);
            prop_assert_eq!(ConditionVocabulary::from_tree(&s), ConditionVocabulary::from_tree(&t));
            prop_assert_eq!(s.content_hash(), t.content_hash());
            let back = AttributeTree::from_json(&s.to_json()).unwrap();
            prop_assert_eq!(ConditionVocabulary::from_tree(&back), ConditionVocabulary::from_tree(&t));
        }

        #[test]
        fn exclusive_free_sets_always_encode(mask in 0u8..16, fam in 0usize..2) {
            let t = default_tree();
            let v = ConditionVocabulary::from_tree(&t);
            let ids: Vec<&String> = v.pairs().iter().enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0).map(|(_, p)| p).collect();
            let set = AttributeSet::pos(ids.iter().map(|s| s.to_string()));
            if check_exclusivity(&t, &set).unwrap().is_empty() {
                prop_assert!(v.encode(Some(Family::ALL[fam]), Some(&set), None).is_ok());
            }
        }
    }
}
