//! End-to-end runs: initialise, pretrain the visual encoder, train, and the
//! variant/depth ablation sweep.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, AnswerType, EvalReport, Protocol};
use crate::model::{solve_dim_for_budget, Variant};
use crate::net::{CachedPredictor, NetConfig, VqaNet};
use crate::training::{pretrain_cnn, train, PretrainConfig, TrainConfig, TrainReport};

/// Everything needed to reproduce one trained network from a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSettings {
    pub train: TrainConfig,
    /// Visual pretraining before the main run; skipped when the CNN is
    /// trained jointly or `iterations` is 0.
    pub pretrain: PretrainConfig,
}

impl RunSettings {
    fn pretrains(&self) -> bool {
        self.train.freeze_cnn && self.pretrain.iterations > 0
    }
}

/// Initialised and, if configured, visually pretrained network.
pub fn prepare(data: &Dataset, cfg: NetConfig, s: &RunSettings) -> Result<VqaNet> {
    s.train.validate()?;
    let mut net = VqaNet::initialized(cfg, s.train.init_range, s.train.seed)?;
    if s.pretrains() {
        pretrain_cnn(&mut net, data, &s.pretrain)?;
    }
    Ok(net)
}

/// [`prepare`] then [`train`].
pub fn fit(data: &Dataset, cfg: NetConfig, s: &RunSettings) -> Result<(VqaNet, TrainReport)> {
    let mut net = prepare(data, cfg, s)?;
    let report = train(&mut net, data, &s.train)?;
    Ok((net, report))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub variant: Variant,
    pub blocks: usize,
    pub joint_dim: usize,
}

/// Variants (a)–(e) at L=3, (b) at L ∈ {1, 2, 4}, and the shortcut-free
/// network at L=3 sized to the parameter budget of (b) at L=3.
pub fn default_sweep(data: &Dataset, joint_dim: usize) -> Result<Vec<AblationEntry>> {
    let entry = |variant: Variant, blocks: usize, joint_dim: usize| AblationEntry {
        label: format!("{variant}-L{blocks}"),
        variant,
        blocks,
        joint_dim,
    };
    let mut out: Vec<AblationEntry> = Variant::FIGURE.iter().map(|&v| entry(v, 3, joint_dim)).collect();
    for l in [1, 2, 4] {
        out.push(entry(Variant::B, l, joint_dim));
    }
    let reference = NetConfig::toy(data, Variant::B, 3, joint_dim).mrn;
    let mn = crate::model::MrnConfig {
        variant: Variant::Mn,
        ..reference
    };
    out.push(entry(
        Variant::Mn,
        3,
        solve_dim_for_budget(&mn, reference.param_count())?,
    ));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub entry: AblationEntry,
    /// Learnable scalars in the MRN blocks and classifier.
    pub params: usize,
    pub open_ended: EvalReport,
    pub multiple_choice: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// Label of the best Open-Ended test accuracy (first on ties).
    pub best: String,
}

impl AblationOutcome {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.entry.label == label)
    }

    /// 1-based rank of `label` by Open-Ended accuracy among `labels`.
    pub fn rank_among(&self, label: &str, labels: &[&str]) -> Option<usize> {
        let acc = self.row(label)?.open_ended.overall();
        let better = labels
            .iter()
            .filter_map(|l| self.row(l))
            .filter(|r| r.open_ended.overall() > acc)
            .count();
        Some(better + 1)
    }
}

/// Trains every entry under identical settings and scores it on the Test
/// split, handing each row and its trained network to `log`. All entries
/// share one pretrained visual encoder; because the CNN
/// is initialised and pretrained identically for every entry this is the
/// same encoder each [`fit`] would produce.
pub fn run_ablation(
    data: &Dataset,
    s: &RunSettings,
    entries: &[AblationEntry],
    mut log: impl FnMut(&AblationRow, &VqaNet),
) -> Result<AblationOutcome> {
    if entries.is_empty() {
        return Err(Error::Config("empty ablation sweep".into()));
    }
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Contract("ablation needs a non-empty test split".into()));
    }
    let first = &entries[0];
    let shared = prepare(
        data,
        NetConfig::toy(data, first.variant, first.blocks, first.joint_dim),
        s,
    )?;
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let cfg = NetConfig::toy(data, e.variant, e.blocks, e.joint_dim);
        let mut net = VqaNet::initialized(cfg, s.train.init_range, s.train.seed)?;
        if s.pretrains() {
            for id in net.cnn.params() {
                let name = net.store.name(id).to_string();
                let src = shared.store.find(&name).expect("same CNN layout");
                net.store.set(id, shared.store.get(src).clone());
            }
        }
        train(&mut net, data, &s.train)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let features = net.image_features(data, &all)?;
        let p = CachedPredictor {
            net: &net,
            features: &features,
        };
        let row = AblationRow {
            entry: e.clone(),
            params: net.mrn.param_count(&net.store),
            open_ended: evaluate(&p, data, &test, Protocol::OpenEnded, false)?,
            multiple_choice: evaluate(&p, data, &test, Protocol::MultipleChoice, false)?,
        };
        log(&row, &net);
        rows.push(row);
    }
    let best = rows
        .iter()
        .fold(None::<&AblationRow>, |b, r| match b {
            Some(b) if b.open_ended.overall() >= r.open_ended.overall() => Some(b),
            _ => Some(r),
        })
        .expect("non-empty")
        .entry
        .label
        .clone();
    Ok(AblationOutcome { rows, best })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("label,variant,blocks,joint_dim,params,oe_all,oe_yn,oe_num,oe_other,mc_all\n");
    for r in rows {
        let oe = &r.open_ended;
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.entry.label,
            r.entry.variant,
            r.entry.blocks,
            r.entry.joint_dim,
            r.params,
            oe.overall(),
            oe.by_type(AnswerType::YesNo),
            oe.by_type(AnswerType::Number),
            oe.by_type(AnswerType::Other),
            r.multiple_choice.overall()
        ));
    }
    s
}
