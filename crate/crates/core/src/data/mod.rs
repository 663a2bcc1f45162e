//! Deterministic synthetic visual QA task: grids of coloured shapes with
//! templated yes/no, counting and attribute questions.
//!
//! Each example owns its scene and its RNG stream `(seed, index)`, so
//! generation is parallel and independent of thread count. A sequential
//! pass then redraws val/test examples whose scene already belongs to an
//! earlier split, so no scene layout is shared between splits.

mod io;
mod question;
mod scene;

pub use question::{answer_words, question_words, Question};
pub use scene::{Color, Object, Scene, ShapeKind};

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::evaluation::AnswerType;
use crate::tensor::Tensor;

pub const HUMAN_ANSWERS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub examples: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub grid: usize,
    pub cell: usize,
    pub max_objects: usize,
    /// Human answers (out of ten) that match the ground truth.
    pub consensus: usize,
    pub candidates: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            examples: 10000,
            train_ratio: 0.8,
            val_ratio: 0.1,
            grid: 4,
            cell: 8,
            max_objects: 8,
            consensus: 9,
            candidates: 18,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.examples == 0 {
            return bad("dataset needs at least one example".into());
        }
        if !(0.0..=1.0).contains(&self.train_ratio)
            || !(0.0..=1.0).contains(&self.val_ratio)
            || self.train_ratio + self.val_ratio > 1.0
        {
            return bad(format!("bad split ratios {} / {}", self.train_ratio, self.val_ratio));
        }
        if self.max_objects == 0 || self.max_objects > self.grid * self.grid {
            return bad(format!(
                "max_objects {} does not fit a {}×{} grid",
                self.max_objects, self.grid, self.grid
            ));
        }
        if self.cell < 4 {
            return bad("cells need at least 4 pixels".into());
        }
        if self.consensus == 0 || self.consensus > HUMAN_ANSWERS {
            return bad(format!("consensus must be in 1..={HUMAN_ANSWERS}"));
        }
        if self.candidates == 0 {
            return bad("at least one candidate answer is required".into());
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let side = self.grid * self.cell;
        [3, side, side]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVqaExample {
    pub scene: Scene,
    pub question: Question,
    pub question_ids: Vec<usize>,
    pub humans: Vec<String>,
    pub answer: String,
    pub answer_id: usize,
    pub answer_type: AnswerType,
    pub candidates: Vec<usize>,
    pub caption: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub question_vocab: Vocab,
    pub answers: Vec<String>,
    pub examples: Vec<ToyVqaExample>,
}

impl Dataset {
    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.examples[i].scene.render(self.config.cell)
    }

    /// `[n, 3, H, W]` batch for the given examples.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let [c, h, w] = self.config.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i).data());
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("image batch")
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].split == split)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

const MAX_REDRAWS: u64 = 10_000;

fn split_of(i: usize, cfg: &GenConfig) -> Split {
    let n_train = (cfg.examples as f64 * cfg.train_ratio).floor() as usize;
    let n_val = (cfg.examples as f64 * cfg.val_ratio).floor() as usize;
    if i < n_train {
        Split::Train
    } else if i < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

fn pick_question(rng: &mut impl Rng, kind: AnswerType, cfg: &GenConfig) -> (Scene, Question) {
    loop {
        let count = rng.gen_range(1..=cfg.max_objects);
        let scene = Scene::random(rng, cfg.grid, count);
        let q = match kind {
            AnswerType::YesNo => {
                if rng.gen_bool(0.5) {
                    let o = scene.objects[rng.gen_range(0..scene.objects.len())];
                    Question::Exists(o.color, o.shape)
                } else {
                    let absent: Vec<_> = Color::ALL
                        .iter()
                        .flat_map(|&c| ShapeKind::ALL.iter().map(move |&s| (c, s)))
                        .filter(|&(c, s)| !scene.objects.iter().any(|o| o.color == c && o.shape == s))
                        .collect();
                    let (c, s) = absent[rng.gen_range(0..absent.len())];
                    Question::Exists(c, s)
                }
            }
            AnswerType::Number => {
                if rng.gen_bool(0.5) {
                    Question::CountShape(ShapeKind::ALL[rng.gen_range(0..3)])
                } else {
                    Question::CountColor(Color::ALL[rng.gen_range(0..Color::ALL.len())])
                }
            }
            AnswerType::Other => {
                let unique_shapes: Vec<_> = ShapeKind::ALL
                    .into_iter()
                    .filter(|&s| scene.objects.iter().filter(|o| o.shape == s).count() == 1)
                    .collect();
                let unique_colors: Vec<_> = Color::ALL
                    .into_iter()
                    .filter(|&c| scene.objects.iter().filter(|o| o.color == c).count() == 1)
                    .collect();
                let by_shape = rng.gen_bool(0.5);
                match (by_shape, unique_shapes.as_slice(), unique_colors.as_slice()) {
                    (true, s, _) if !s.is_empty() => Question::ColorOf(*s.choose(rng).expect("non-empty")),
                    (false, _, c) if !c.is_empty() => Question::ShapeOf(*c.choose(rng).expect("non-empty")),
                    _ => continue,
                }
            }
        };
        return (scene, q);
    }
}

fn distractor(rng: &mut impl Rng, q: &Question, truth: &str, max_count: usize) -> String {
    let pool: Vec<String> = match q {
        Question::Exists(..) => vec!["yes".into(), "no".into()],
        Question::CountShape(_) | Question::CountColor(_) => (0..=max_count).map(|n| n.to_string()).collect(),
        Question::ColorOf(_) => Color::ALL.iter().map(|c| c.name().to_string()).collect(),
        Question::ShapeOf(_) => ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect(),
    };
    let others: Vec<&String> = pool.iter().filter(|a| *a != truth).collect();
    others[rng.gen_range(0..others.len())].clone()
}

/// Stream `index` for the first draw of an example, then `index + attempt·2³²`
/// for redraws.
fn example_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + (attempt << 32));
    rng
}

fn make_example(i: usize, attempt: u64, cfg: &GenConfig, vocab: &Vocab, answers: &[String]) -> ToyVqaExample {
    let mut rng = example_rng(cfg.seed, i, attempt);
    let kind = [AnswerType::YesNo, AnswerType::Number, AnswerType::Other][i % 3];
    let (scene, question) = pick_question(&mut rng, kind, cfg);
    let answer = question.answer(&scene).expect("generated questions are answerable");
    let answer_id = answers.iter().position(|a| *a == answer).expect("answer in vocabulary");

    let mut humans = vec![answer.clone(); cfg.consensus];
    while humans.len() < HUMAN_ANSWERS {
        humans.push(distractor(&mut rng, &question, &answer, cfg.max_objects));
    }
    humans.shuffle(&mut rng);

    let mut cand: BTreeSet<usize> = humans
        .iter()
        .map(|h| answers.iter().position(|a| a == h).expect("human answer in vocabulary"))
        .collect();
    let want = cfg.candidates.min(answers.len()).max(cand.len());
    let mut rest: Vec<usize> = (0..answers.len()).filter(|a| !cand.contains(a)).collect();
    rest.shuffle(&mut rng);
    cand.extend(rest.into_iter().take(want - cand.len()));
    let mut candidates: Vec<usize> = cand.into_iter().collect();
    candidates.shuffle(&mut rng);

    let text = question.text();
    ToyVqaExample {
        question_ids: vocab.encode(&text).expect("template words are in the vocabulary"),
        caption: scene.caption(),
        scene,
        question,
        humans,
        answer,
        answer_id,
        answer_type: kind,
        candidates,
        split: split_of(i, cfg),
    }
}

pub fn question_vocab() -> Vocab {
    Vocab::new(&question_words()).expect("static vocabulary")
}

/// Generates `cfg.examples` examples; question types cycle Y/N, Number,
/// Other so each takes a third of every split.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = question_vocab();
    let answers = answer_words(cfg.max_objects);
    let mut examples: Vec<ToyVqaExample> = (0..cfg.examples)
        .into_par_iter()
        .map(|i| make_example(i, 0, cfg, &vocab, &answers))
        .collect();
    // Examples are ordered train, val, test.
    let mut owner: HashMap<Vec<Object>, Split> = HashMap::new();
    for (i, e) in examples.iter_mut().enumerate() {
        let mut attempt = 0;
        while owner.get(&e.scene.layout()).is_some_and(|&s| s != e.split) {
            attempt += 1;
            if attempt > MAX_REDRAWS {
                return Err(Error::Config(format!(
                    "could not find a scene for example {i} unused by other splits; enlarge the grid or max_objects"
                )));
            }
            *e = make_example(i, attempt, cfg, &vocab, &answers);
        }
        owner.insert(e.scene.layout(), e.split);
    }
    Ok(Dataset {
        config: *cfg,
        question_vocab: vocab,
        answers,
        examples,
    })
}
