use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, ShapeKind};
use crate::evaluation::AnswerType;

/// Templated question about a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Question {
    /// "is there a red square"
    Exists(Color, ShapeKind),
    /// "how many circles are there"
    CountShape(ShapeKind),
    /// "how many red objects are there"
    CountColor(Color),
    /// "what color is the triangle" (the shape occurs exactly once)
    ColorOf(ShapeKind),
    /// "what shape is the red object" (the colour occurs exactly once)
    ShapeOf(Color),
}

impl Question {
    pub fn text(&self) -> String {
        match self {
            Question::Exists(c, s) => format!("is there a {} {}", c.name(), s.name()),
            Question::CountShape(s) => format!("how many {} are there", s.plural()),
            Question::CountColor(c) => format!("how many {} objects are there", c.name()),
            Question::ColorOf(s) => format!("what color is the {}", s.name()),
            Question::ShapeOf(c) => format!("what shape is the {} object", c.name()),
        }
    }

    pub fn answer_type(&self) -> AnswerType {
        match self {
            Question::Exists(..) => AnswerType::YesNo,
            Question::CountShape(_) | Question::CountColor(_) => AnswerType::Number,
            Question::ColorOf(_) | Question::ShapeOf(_) => AnswerType::Other,
        }
    }

    /// Ground truth, or `None` when the question presupposes a unique object
    /// the scene does not have.
    pub fn answer(&self, scene: &Scene) -> Option<String> {
        let objs = &scene.objects;
        match *self {
            Question::Exists(c, s) => {
                let yes = objs.iter().any(|o| o.color == c && o.shape == s);
                Some(if yes { "yes" } else { "no" }.to_string())
            }
            Question::CountShape(s) => Some(objs.iter().filter(|o| o.shape == s).count().to_string()),
            Question::CountColor(c) => Some(objs.iter().filter(|o| o.color == c).count().to_string()),
            Question::ColorOf(s) => {
                let mut it = objs.iter().filter(|o| o.shape == s);
                match (it.next(), it.next()) {
                    (Some(o), None) => Some(o.color.name().to_string()),
                    _ => None,
                }
            }
            Question::ShapeOf(c) => {
                let mut it = objs.iter().filter(|o| o.color == c);
                match (it.next(), it.next()) {
                    (Some(o), None) => Some(o.shape.name().to_string()),
                    _ => None,
                }
            }
        }
    }
}

/// Every word that can appear in a question.
pub fn question_words() -> Vec<String> {
    let mut words: Vec<String> = [
        "is", "there", "a", "how", "many", "are", "objects", "what", "color", "shape", "the", "object",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    for s in ShapeKind::ALL {
        words.push(s.name().to_string());
        words.push(s.plural().to_string());
    }
    words
}

/// Closed answer vocabulary: yes/no, counts 0..=max_count, colours, shapes.
pub fn answer_words(max_count: usize) -> Vec<String> {
    let mut words = vec!["yes".to_string(), "no".to_string()];
    words.extend((0..=max_count).map(|n| n.to_string()));
    words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.name().to_string()));
    words
}
