//! The purification loop: prototype production, similarity classification,
//! query-pair relations, transduction degrees, and top-L prototype
//! refinement.
//!
//! One run classifies every query against the current prototypes, clusters
//! queries by predicted label, scores each cluster member by how strongly it
//! relates to its own cluster versus the most confusable rival, folds the
//! top-L members of each cluster back into its prototype, and repeats. All
//! functions here are pure: same inputs, same outputs, bit-for-bit — ties
//! are always broken by the smallest index and reductions run in a fixed
//! order.

use serde::{Deserialize, Serialize};

use crate::embedding::{ClassMap, Episode, LabeledSample};
use crate::error::{Error, Result};
use crate::simnet::SimilarityNet;

/// Default fusion weight for the rival-cluster penalty.
pub const LAMBDA_DEFAULT: f64 = 0.8;
/// Alternate profile for embedding spaces with heavier within-class spread,
/// where the rival-cluster signal is noisier and deserves less weight.
pub const LAMBDA_ALTERNATE: f64 = 0.6;
/// Default number of purification iterations.
pub const ITERATIONS_DEFAULT: usize = 3;
/// Default number of cluster members folded back into each prototype.
pub const TOP_L_DEFAULT: usize = 9;

/// Per-class prototype vectors at a given purification iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    vectors: Vec<Vec<f64>>,
    iteration: usize,
}

impl Prototypes {
    /// Builds prototypes from raw rows, rejecting empty/ragged/non-finite
    /// input.
    pub fn from_vectors(vectors: Vec<Vec<f64>>, iteration: usize) -> Result<Self> {
        if vectors.is_empty() || vectors[0].is_empty() {
            return Err(Error::Config("prototypes need at least one non-empty row".into()));
        }
        let dim = vectors[0].len();
        for (n, row) in vectors.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "prototype {n} has {} dimensions, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("prototype {n}")));
            }
        }
        Ok(Self { vectors, iteration })
    }

    pub fn n_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn vector(&self, n: usize) -> &[f64] {
        &self.vectors[n]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

/// Query-versus-prototype similarity scores, row i = query, column n =
/// class. Entries are sigmoid outputs, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_queries: usize,
    n_classes: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, query: usize, class: usize) -> f64 {
        self.data[query * self.n_classes + class]
    }
}

/// Predicted label per query plus the inverse view: per class, the member
/// query indices in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    predicted: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds the assignment from per-query predictions; membership lists
    /// come out in ascending query order by construction.
    pub fn from_predictions(predicted: Vec<usize>, n_classes: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); n_classes];
        for (i, &label) in predicted.iter().enumerate() {
            if label >= n_classes {
                return Err(Error::Config(format!(
                    "query {i} predicted class {label}, but there are only {n_classes} classes"
                )));
            }
            members[label].push(i);
        }
        Ok(Self { predicted, members })
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn n_queries(&self) -> usize {
        self.predicted.len()
    }
}

/// Symmetric query-pair relation scores with a constant diagonal (every
/// self-pair is the same zero-difference input).
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    n: usize,
    data: Vec<f64>,
}

impl RelationMatrix {
    /// Wraps a precomputed relation matrix, enforcing the structural
    /// invariants: square, exactly symmetric, entries in (0, 1), constant
    /// diagonal.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InsufficientPairs(n));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "relation row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
        }
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            data.extend_from_slice(row);
        }
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Config(format!("relation ({i},{j}) = {v} outside (0,1)")));
                }
                if data[i * n + j] != data[j * n + i] {
                    return Err(Error::Config(format!("relation matrix asymmetric at ({i},{j})")));
                }
            }
            if data[i * n + i] != data[0] {
                return Err(Error::Config("relation diagonal is not constant".into()));
            }
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Per-query transduction degrees: affinity to the own cluster (`d_pos`),
/// the strongest mean affinity to any rival cluster (`d_neg`), and the
/// fused score `d = d_pos − λ·d_neg` that ranks refinement candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeTable {
    d_pos: Vec<f64>,
    d_neg: Vec<f64>,
    d: Vec<f64>,
    lambda: f64,
}

impl DegreeTable {
    pub fn d_pos(&self) -> &[f64] {
        &self.d_pos
    }

    pub fn d_neg(&self) -> &[f64] {
        &self.d_neg
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Which part of the refinement machinery a run exercises. Modes only
/// change how cluster members are selected for refinement; classification
/// itself is identical everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// No purification at all: classify against the initial prototypes.
    Baseline,
    /// Fold every cluster member into the prototype, no ranking.
    RefAll,
    /// Rank members by their classification score for their own cluster.
    SelByScore,
    /// Rank members by own-cluster affinity only.
    IntraPosOnly,
    /// Rank members by the fused degree (own minus λ-weighted rival).
    Full,
}

impl AblationMode {
    /// All modes in ablation-ladder order, weakest first.
    pub const LADDER: [AblationMode; 5] = [
        AblationMode::Baseline,
        AblationMode::RefAll,
        AblationMode::SelByScore,
        AblationMode::IntraPosOnly,
        AblationMode::Full,
    ];

    /// Stable lowercase name, used in CSV output and file names.
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::RefAll => "ref_all",
            AblationMode::SelByScore => "sel_by_score",
            AblationMode::IntraPosOnly => "intra_pos_only",
            AblationMode::Full => "full",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::LADDER
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode \"{s}\"")))
    }
}

/// Purification-loop parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcpConfig {
    /// Number of classify/refine iterations T. Zero means prototypes are
    /// never refined.
    pub iterations: usize,
    /// Cluster members folded into each prototype per iteration.
    pub top_l: usize,
    /// Rival-cluster fusion weight λ; only consulted in [`AblationMode::Full`].
    pub lambda: f64,
    pub mode: AblationMode,
}

impl Default for PcpConfig {
    fn default() -> Self {
        Self {
            iterations: ITERATIONS_DEFAULT,
            top_l: TOP_L_DEFAULT,
            lambda: LAMBDA_DEFAULT,
            mode: AblationMode::Full,
        }
    }
}

impl PcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_l == 0 {
            return Err(Error::Config("top_l must be at least 1".into()));
        }
        if self.mode == AblationMode::Full && !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean of each class's support embeddings, in class-map order; the
/// starting point (iteration 0) of the purification loop.
pub fn compute_prototypes(support: &[LabeledSample], class_map: &ClassMap) -> Result<Prototypes> {
    if support.is_empty() {
        return Err(Error::Config("support set is empty".into()));
    }
    let dim = support[0].embedding.dim();
    let mut vectors = Vec::with_capacity(class_map.len());
    for n in 0..class_map.len() {
        let label = class_map.label(n).expect("index in range");
        let mut acc = vec![0.0; dim];
        let mut count = 0usize;
        for sample in support {
            if sample.label == label {
                if sample.embedding.dim() != dim {
                    return Err(Error::Shape(format!(
                        "support mixes embedding widths {dim} and {}",
                        sample.embedding.dim()
                    )));
                }
                for (a, v) in acc.iter_mut().zip(sample.embedding.values()) {
                    *a += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::MissingClass(label.to_string()));
        }
        for a in &mut acc {
            *a /= count as f64;
        }
        vectors.push(acc);
    }
    Prototypes::from_vectors(vectors, 0)
}

/// Scores every query against every prototype and assigns each query to its
/// best class, ties going to the smallest class index.
pub fn classify(
    queries: &[LabeledSample],
    prototypes: &Prototypes,
    classifier: &SimilarityNet,
) -> Result<(ScoreMatrix, ClusterAssignment)> {
    if queries.is_empty() {
        return Err(Error::Config("no queries to classify".into()));
    }
    if prototypes.dim() != classifier.input_dim() {
        return Err(Error::Shape(format!(
            "prototype width {} vs network width {}",
            prototypes.dim(),
            classifier.input_dim()
        )));
    }
    for (i, q) in queries.iter().enumerate() {
        if q.embedding.dim() != prototypes.dim() {
            return Err(Error::Shape(format!(
                "query {i} has width {}, prototypes have {}",
                q.embedding.dim(),
                prototypes.dim()
            )));
        }
    }

    let n_classes = prototypes.n_classes();
    let mut data = Vec::with_capacity(queries.len() * n_classes);
    let mut predicted = Vec::with_capacity(queries.len());
    for q in queries {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for n in 0..n_classes {
            let diff: Vec<f64> = q
                .embedding
                .values()
                .iter()
                .zip(prototypes.vector(n))
                .map(|(a, b)| (a - b).abs())
                .collect();
            let s = classifier.forward(&diff)?;
            if s > best_score {
                best = n;
                best_score = s;
            }
            data.push(s);
        }
        predicted.push(best);
    }
    let scores = ScoreMatrix {
        n_queries: queries.len(),
        n_classes,
        data,
    };
    let assignment = ClusterAssignment::from_predictions(predicted, n_classes)?;
    Ok((scores, assignment))
}

/// Relation score for every query pair. Each unordered pair is evaluated
/// once and mirrored, so the matrix is exactly symmetric; the diagonal is
/// the network's zero-difference score.
pub fn relation_matrix(queries: &[LabeledSample], relation: &SimilarityNet) -> Result<RelationMatrix> {
    let n = queries.len();
    if n < 2 {
        return Err(Error::InsufficientPairs(n));
    }
    for (i, q) in queries.iter().enumerate() {
        if q.embedding.dim() != relation.input_dim() {
            return Err(Error::Shape(format!(
                "query {i} has width {}, network expects {}",
                q.embedding.dim(),
                relation.input_dim()
            )));
        }
    }
    let mut data = vec![0.0; n * n];
    let self_score = relation.forward(&vec![0.0; relation.input_dim()])?;
    for i in 0..n {
        data[i * n + i] = self_score;
        for j in (i + 1)..n {
            let diff = queries[i].embedding.abs_diff(&queries[j].embedding);
            let r = relation.forward(&diff)?;
            data[i * n + j] = r;
            data[j * n + i] = r;
        }
    }
    Ok(RelationMatrix { n, data })
}

/// Transduction degrees for every query under a cluster assignment.
///
/// `d_pos` is the mean relation to the query's own cluster peers (self
/// excluded; 0 for a singleton cluster). For every other non-empty cluster
/// the mean relation is computed and the maximum becomes `d_neg` (0 when
/// every other cluster is empty). The fused rank score is
/// `d = d_pos − λ·d_neg`.
///
/// Panics if `assignment` and `rel` describe different query sets; the
/// degenerate cluster shapes are all well-defined.
pub fn degrees(assignment: &ClusterAssignment, rel: &RelationMatrix, lambda: f64) -> DegreeTable {
    let nm = assignment.n_queries();
    assert_eq!(nm, rel.n(), "assignment and relation matrix disagree on query count");
    let members = assignment.members();
    let mut d_pos = vec![0.0; nm];
    let mut d_neg = vec![0.0; nm];
    let mut d = vec![0.0; nm];
    for i in 0..nm {
        let own = assignment.predicted()[i];

        let mut sum = 0.0;
        let mut peers = 0usize;
        for &j in &members[own] {
            if j != i {
                sum += rel.get(i, j);
                peers += 1;
            }
        }
        if peers > 0 {
            d_pos[i] = sum / peers as f64;
        }

        let mut max_rival: Option<f64> = None;
        for (n, cluster) in members.iter().enumerate() {
            if n == own || cluster.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for &j in cluster {
                s += rel.get(i, j);
            }
            let mean = s / cluster.len() as f64;
            if max_rival.is_none_or(|m| mean > m) {
                max_rival = Some(mean);
            }
        }
        d_neg[i] = max_rival.unwrap_or(0.0);
        d[i] = d_pos[i] - lambda * d_neg[i];
    }
    DegreeTable {
        d_pos,
        d_neg,
        d,
        lambda,
    }
}

/// Sorts cluster members by a rank key (descending, ties to the smaller
/// query index) and keeps at most `top_l`.
fn select_top(members: &[usize], key: impl Fn(usize) -> f64, top_l: usize) -> Vec<usize> {
    let mut ranked = members.to_vec();
    ranked.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    ranked.truncate(top_l.min(ranked.len()));
    ranked
}

/// Folds the selected queries of each cluster into its prototype:
/// `p' = (p + Σ selected f) / (count + 1)`, summed in selection order. A
/// cluster with no selection keeps its prototype unchanged.
fn refine_selected(prototypes: &Prototypes, selected: &[Vec<usize>], queries: &[LabeledSample]) -> Prototypes {
    assert_eq!(selected.len(), prototypes.n_classes());
    let mut vectors = Vec::with_capacity(prototypes.n_classes());
    for (n, picks) in selected.iter().enumerate() {
        let mut row = prototypes.vector(n).to_vec();
        if !picks.is_empty() {
            for &i in picks {
                for (acc, v) in row.iter_mut().zip(queries[i].embedding.values()) {
                    *acc += v;
                }
            }
            let divisor = (picks.len() + 1) as f64;
            for acc in &mut row {
                *acc /= divisor;
            }
        }
        vectors.push(row);
    }
    Prototypes {
        vectors,
        iteration: prototypes.iteration() + 1,
    }
}

/// One degree-ranked refinement step: per cluster, the `min(L, size)`
/// members with the highest fused degree are averaged together with the
/// current prototype. Empty clusters keep their prototype.
pub fn refine_prototypes(
    prototypes: &Prototypes,
    assignment: &ClusterAssignment,
    table: &DegreeTable,
    queries: &[LabeledSample],
    top_l: usize,
) -> Prototypes {
    assert_eq!(assignment.members().len(), prototypes.n_classes());
    assert_eq!(table.d().len(), assignment.n_queries());
    let selected: Vec<Vec<usize>> = assignment
        .members()
        .iter()
        .map(|cluster| select_top(cluster, |i| table.d()[i], top_l))
        .collect();
    refine_selected(prototypes, &selected, queries)
}

/// State captured at one point of the purification loop: the prototypes in
/// force and the assignment they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct PcpStep {
    pub prototypes: Prototypes,
    pub assignment: ClusterAssignment,
}

/// Full record of one purification run: step `t` holds the iteration-`t`
/// prototypes and their assignment, so a run with T iterations has T+1
/// steps and the last one is the final prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PcpRun {
    steps: Vec<PcpStep>,
}

impl PcpRun {
    pub fn steps(&self) -> &[PcpStep] {
        &self.steps
    }

    pub fn final_step(&self) -> &PcpStep {
        self.steps.last().expect("a run has at least one step")
    }

    /// Final predicted local class per query.
    pub fn predictions(&self) -> &[usize] {
        self.final_step().assignment.predicted()
    }

    /// Serializes the trace as JSON Lines, one record per step with the
    /// step's accuracy against the given ground truth.
    pub fn trace_jsonl(&self, truth: &[usize]) -> Result<String> {
        #[derive(Serialize)]
        struct TraceRecord<'a> {
            t: usize,
            prototypes: &'a [Vec<f64>],
            predicted: &'a [usize],
            accuracy: f64,
        }

        let mut out = String::new();
        for (t, step) in self.steps.iter().enumerate() {
            let predicted = step.assignment.predicted();
            if predicted.len() != truth.len() {
                return Err(Error::Shape(format!(
                    "{} predictions vs {} ground-truth labels",
                    predicted.len(),
                    truth.len()
                )));
            }
            let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
            let record = TraceRecord {
                t,
                prototypes: step.prototypes.rows(),
                predicted,
                accuracy: correct as f64 / truth.len() as f64,
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs the full purification loop on one episode.
///
/// T iterations of {classify → select cluster members → refine prototypes}
/// followed by a final classification. The ablation mode only changes the
/// selection rule; [`AblationMode::Baseline`] skips the loop entirely. The
/// relation matrix depends only on the queries, so it is computed once and
/// reused across iterations, while degrees are recomputed from each fresh
/// assignment.
pub fn pcp_run(
    episode: &Episode,
    classifier: &SimilarityNet,
    relation: &SimilarityNet,
    config: &PcpConfig,
) -> Result<PcpRun> {
    config.validate()?;
    let queries = episode.query();
    let mut prototypes = compute_prototypes(episode.support(), episode.class_map())?;

    let iterations = match config.mode {
        AblationMode::Baseline => 0,
        _ => config.iterations,
    };
    let needs_relations = iterations > 0
        && matches!(config.mode, AblationMode::IntraPosOnly | AblationMode::Full);
    let relations = if needs_relations {
        Some(relation_matrix(queries, relation)?)
    } else {
        None
    };

    let mut steps = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let (scores, assignment) = classify(queries, &prototypes, classifier)?;
        let selected: Vec<Vec<usize>> = match config.mode {
            AblationMode::Baseline => unreachable!("baseline never iterates"),
            AblationMode::RefAll => assignment.members().to_vec(),
            AblationMode::SelByScore => assignment
                .members()
                .iter()
                .enumerate()
                .map(|(n, cluster)| select_top(cluster, |i| scores.get(i, n), config.top_l))
                .collect(),
            AblationMode::IntraPosOnly | AblationMode::Full => {
                let lambda = if config.mode == AblationMode::Full {
                    config.lambda
                } else {
                    0.0
                };
                let table = degrees(&assignment, relations.as_ref().expect("computed above"), lambda);
                assignment
                    .members()
                    .iter()
                    .map(|cluster| select_top(cluster, |i| table.d()[i], config.top_l))
                    .collect()
            }
        };
        let next = refine_selected(&prototypes, &selected, queries);
        steps.push(PcpStep {
            prototypes,
            assignment,
        });
        prototypes = next;
    }

    let (_, assignment) = classify(queries, &prototypes, classifier)?;
    steps.push(PcpStep {
        prototypes,
        assignment,
    });
    Ok(PcpRun { steps })
}
