use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Color, Scene, SceneObject, Shape, SizeClass};

/// Attribute description of one object: shape always, size and colour optional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub size: Option<SizeClass>,
    pub color: Option<Color>,
    pub shape: Shape,
}

impl Descriptor {
    pub fn matches(&self, o: &SceneObject) -> bool {
        o.shape == self.shape && self.size.is_none_or(|s| s == o.size) && self.color.is_none_or(|c| c == o.color)
    }

    pub fn arity(&self) -> usize {
        self.size.is_some() as usize + self.color.is_some() as usize
    }

    pub fn phrase(&self) -> String {
        let mut words = Vec::new();
        if let Some(s) = self.size {
            words.push(s.name());
        }
        if let Some(c) = self.color {
            words.push(c.name());
        }
        words.push(self.shape.name());
        words.join(" ")
    }

    /// All four descriptors of an object, fewest attributes first.
    fn of(o: &SceneObject) -> [Descriptor; 4] {
        [
            Descriptor { size: None, color: None, shape: o.shape },
            Descriptor { size: None, color: Some(o.color), shape: o.shape },
            Descriptor { size: Some(o.size), color: None, shape: o.shape },
            Descriptor { size: Some(o.size), color: Some(o.color), shape: o.shape },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Compares box centers.
    pub fn holds(self, a: &SceneObject, b: &SceneObject) -> bool {
        let (ax, ay) = a.bbox.center();
        let (bx, by) = b.bbox.center();
        match self {
            Relation::LeftOf => ax < bx,
            Relation::RightOf => ax > bx,
            Relation::Above => ay < by,
            Relation::Below => ay > by,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExpression {
    pub target: Descriptor,
    pub relation: Option<(Relation, Descriptor)>,
}

impl ParsedExpression {
    pub fn text(&self) -> String {
        match &self.relation {
            None => format!("the {}", self.target.phrase()),
            Some((r, a)) => format!("the {} {} the {}", self.target.phrase(), r.phrase(), a.phrase()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub referent: usize,
}

fn parse_descriptor(words: &[&str]) -> Option<Descriptor> {
    let (shape, rest) = words.split_last()?;
    let shape = shape.parse().ok()?;
    let (mut size, mut color) = (None, None);
    match rest {
        [] => {}
        [a] => {
            if let Ok(s) = a.parse() {
                size = Some(s);
            } else {
                color = Some(a.parse().ok()?);
            }
        }
        [a, b] => {
            size = Some(a.parse().ok()?);
            color = Some(b.parse().ok()?);
        }
        _ => return None,
    }
    Some(Descriptor { size, color, shape })
}

/// Parses the generator's grammar; `None` for anything outside it.
pub fn parse_expression(text: &str) -> Option<ParsedExpression> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.first() != Some(&"the") {
        return None;
    }
    let words = &words[1..];
    for r in Relation::ALL {
        let rel: Vec<&str> = r.phrase().split(' ').collect();
        for i in 0..words.len() {
            if words[i..].starts_with(&rel) && words.get(i + rel.len()) == Some(&"the") {
                let target = parse_descriptor(&words[..i])?;
                let anchor = parse_descriptor(&words[i + rel.len() + 1..])?;
                return Some(ParsedExpression { target, relation: Some((r, anchor)) });
            }
        }
    }
    Some(ParsedExpression { target: parse_descriptor(words)?, relation: None })
}

/// Indices of every scene object the expression denotes. A relational
/// expression whose anchor is ambiguous or missing denotes nothing.
pub fn evaluate_expression(scene: &Scene, e: &ParsedExpression) -> Vec<usize> {
    let objs = &scene.objects;
    match &e.relation {
        None => (0..objs.len()).filter(|&i| e.target.matches(&objs[i])).collect(),
        Some((rel, anchor)) => {
            let anchors: Vec<usize> = (0..objs.len()).filter(|&i| anchor.matches(&objs[i])).collect();
            let [a] = anchors[..] else { return Vec::new() };
            (0..objs.len()).filter(|&i| i != a && e.target.matches(&objs[i]) && rel.holds(&objs[i], &objs[a])).collect()
        }
    }
}

fn unique(scene: &Scene, e: &ParsedExpression, referent: usize) -> bool {
    evaluate_expression(scene, e) == [referent]
}

/// Shortest attribute description that singles out the referent, falling
/// back to a spatial relation to a uniquely described anchor. Ties between
/// equally short candidates are broken by `rng`. `None` when the object
/// cannot be singled out.
pub fn synthesize_expression<R: Rng>(scene: &Scene, referent: usize, rng: &mut R) -> Option<Expression> {
    let obj = scene.objects.get(referent)?;
    let plain: Vec<ParsedExpression> = Descriptor::of(obj)
        .into_iter()
        .map(|d| ParsedExpression { target: d, relation: None })
        .filter(|e| unique(scene, e, referent))
        .collect();
    if let Some(min) = plain.iter().map(|e| e.target.arity()).min() {
        let best: Vec<&ParsedExpression> = plain.iter().filter(|e| e.target.arity() == min).collect();
        let e = best.choose(rng)?;
        return Some(Expression { text: e.text(), referent });
    }
    let mut relational = Vec::new();
    for (a, anchor_obj) in scene.objects.iter().enumerate() {
        if a == referent {
            continue;
        }
        let Some(anchor) = Descriptor::of(anchor_obj)
            .into_iter()
            .find(|d| unique(scene, &ParsedExpression { target: *d, relation: None }, a))
        else {
            continue;
        };
        for target in Descriptor::of(obj) {
            for r in Relation::ALL {
                let e = ParsedExpression { target, relation: Some((r, anchor)) };
                if unique(scene, &e, referent) {
                    relational.push(e);
                }
            }
        }
    }
    let cost = |e: &ParsedExpression| e.target.arity() + e.relation.as_ref().map_or(0, |(_, a)| a.arity());
    let min = relational.iter().map(cost).min()?;
    let best: Vec<&ParsedExpression> = relational.iter().filter(|e| cost(e) == min).collect();
    let e = best.choose(rng)?;
    Some(Expression { text: e.text(), referent })
}
