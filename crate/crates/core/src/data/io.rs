//! Dataset serialization.
//!
//! Binary layout (little endian): 8-byte magic, `u32` version, generator
//! config, question vocabulary, answer vocabulary, then the examples.
//! Strings are `u32` length + UTF-8 bytes. Images are not stored; they are a
//! pure function of the scene.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{Color, Dataset, GenConfig, Object, Question, Scene, ShapeKind, Split, ToyVqaExample, HUMAN_ANSWERS};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::evaluation::AnswerType;

const MAGIC: &[u8; 8] = b"MRNVQA\n\0";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0
            .extend_from_slice(&(u32::try_from(v).expect("fits in u32")).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn ids(&mut self, ids: &[usize]) {
        self.u32(ids.len());
        ids.iter().for_each(|&i| self.u32(i));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("unexpected end of file (need {n} bytes)"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let start = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            offset: start,
            msg: "invalid utf-8".into(),
        })
    }
    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn decoded<T>(&mut self, what: &str, v: Option<T>) -> Result<T> {
        match v {
            Some(v) => Ok(v),
            None => {
                self.pos -= 1;
                self.err(format!("invalid {what} code"))
            }
        }
    }
    fn color(&mut self) -> Result<Color> {
        let c = self.u8()?;
        self.decoded("color", Color::from_code(c))
    }
    fn shape(&mut self) -> Result<ShapeKind> {
        let c = self.u8()?;
        self.decoded("shape", ShapeKind::from_code(c))
    }
}

fn write_question(w: &mut Writer, q: &Question) {
    match *q {
        Question::Exists(c, s) => {
            w.u8(0);
            w.u8(c.code());
            w.u8(s.code());
        }
        Question::CountShape(s) => {
            w.u8(1);
            w.u8(s.code());
        }
        Question::CountColor(c) => {
            w.u8(2);
            w.u8(c.code());
        }
        Question::ColorOf(s) => {
            w.u8(3);
            w.u8(s.code());
        }
        Question::ShapeOf(c) => {
            w.u8(4);
            w.u8(c.code());
        }
    }
}

fn read_question(r: &mut Reader) -> Result<Question> {
    match r.u8()? {
        0 => Ok(Question::Exists(r.color()?, r.shape()?)),
        1 => Ok(Question::CountShape(r.shape()?)),
        2 => Ok(Question::CountColor(r.color()?)),
        3 => Ok(Question::ColorOf(r.shape()?)),
        4 => Ok(Question::ShapeOf(r.color()?)),
        k => {
            r.pos -= 1;
            r.err(format!("unknown question kind {k}"))
        }
    }
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(FORMAT_VERSION as usize);
        let c = &self.config;
        w.u64(c.seed);
        w.u32(c.examples);
        w.f64(c.train_ratio);
        w.f64(c.val_ratio);
        for v in [c.grid, c.cell, c.max_objects, c.consensus, c.candidates] {
            w.u32(v);
        }
        let qv: Vec<&str> = (1..self.question_vocab.len())
            .filter_map(|i| self.question_vocab.token(i))
            .collect();
        w.u32(qv.len());
        qv.iter().for_each(|s| w.str(s));
        w.u32(self.answers.len());
        self.answers.iter().for_each(|s| w.str(s));
        w.u32(self.examples.len());
        for e in &self.examples {
            w.u8(e.split.code());
            w.u32(e.scene.grid);
            w.u32(e.scene.objects.len());
            for o in &e.scene.objects {
                w.u8(o.shape.code());
                w.u8(o.color.code());
                w.u32(o.row);
                w.u32(o.col);
            }
            write_question(&mut w, &e.question);
            w.ids(&e.question_ids);
            w.u32(e.humans.len());
            e.humans.iter().for_each(|h| w.str(h));
            w.str(&e.answer);
            w.u32(e.answer_id);
            w.u8(e.answer_type.code());
            w.ids(&e.candidates);
            w.str(&e.caption);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            r.pos = 0;
            return r.err("not a dataset file (bad magic)");
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            r.pos -= 4;
            return r.err(format!("unsupported format version {version}"));
        }
        let config = GenConfig {
            seed: r.u64()?,
            examples: r.u32()?,
            train_ratio: r.f64()?,
            val_ratio: r.f64()?,
            grid: r.u32()?,
            cell: r.u32()?,
            max_objects: r.u32()?,
            consensus: r.u32()?,
            candidates: r.u32()?,
        };
        let nq = r.u32()?;
        let words = (0..nq).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let question_vocab = Vocab::new(&words).or_else(|e| r.err(e.to_string()))?;
        let na = r.u32()?;
        let answers = (0..na).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()?;
        let mut examples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let s = r.u8()?;
            let split = r.decoded("split", Split::from_code(s))?;
            let grid = r.u32()?;
            let nobj = r.u32()?;
            let mut objects = Vec::with_capacity(nobj.min(1024));
            for _ in 0..nobj {
                objects.push(Object {
                    shape: r.shape()?,
                    color: r.color()?,
                    row: r.u32()?,
                    col: r.u32()?,
                });
            }
            let scene = Scene { grid, objects };
            if !scene.is_valid() {
                return r.err("invalid scene");
            }
            let question = read_question(&mut r)?;
            let question_ids = r.ids()?;
            let nh = r.u32()?;
            if nh != HUMAN_ANSWERS {
                return r.err(format!("expected {HUMAN_ANSWERS} human answers, found {nh}"));
            }
            let humans = (0..nh).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
            let answer = r.str()?;
            let answer_id = r.u32()?;
            let t = r.u8()?;
            let answer_type = r.decoded("answer type", AnswerType::from_code(t))?;
            let candidates = r.ids()?;
            let caption = r.str()?;
            examples.push(ToyVqaExample {
                scene,
                question,
                question_ids,
                humans,
                answer,
                answer_id,
                answer_type,
                candidates,
                caption,
                split,
            });
        }
        if r.pos != buf.len() {
            return r.err("trailing bytes after last example");
        }
        Ok(Self {
            config,
            question_vocab,
            answers,
            examples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// One JSON object per line, without pixels.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            index: usize,
            split: Split,
            question: String,
            answer: &'a str,
            answer_type: AnswerType,
            humans: &'a [String],
            candidates: Vec<&'a str>,
            caption: &'a str,
            scene: &'a Scene,
        }
        let mut out = Vec::new();
        for (index, e) in self.examples.iter().enumerate() {
            let line = Line {
                index,
                split: e.split,
                question: e.question.text(),
                answer: &e.answer,
                answer_type: e.answer_type,
                humans: &e.humans,
                candidates: e.candidates.iter().map(|&c| self.answers[c].as_str()).collect(),
                caption: &e.caption,
                scene: &e.scene,
            };
            serde_json::to_writer(&mut out, &line).expect("in-memory json");
            out.write_all(b"\n").expect("in-memory write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
