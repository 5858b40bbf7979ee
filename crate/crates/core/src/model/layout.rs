//! Flat parameter layout: every tensor is a named slice of one `Vec<f64>`.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub group: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of a two-hidden-layer output stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RuleIdx {
    pub query: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub classifier: MlpIdx,
    pub forecaster: MlpIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Index {
    pub embed_w: usize,
    pub embed_b: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub rules: Vec<RuleIdx>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub(crate) index: Index,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, group: &str, rows: usize, cols: usize, init: Init) -> usize {
        let offset = self.total;
        self.tensors.push(TensorSpec { name, group: group.to_string(), offset, rows, cols, init });
        self.total += rows * cols;
        offset
    }

    fn weight(&mut self, name: String, group: &str, fan_in: usize, fan_out: usize) -> usize {
        self.add(name, group, fan_in, fan_out, Init::Glorot { fan_in, fan_out })
    }

    fn mlp(&mut self, prefix: &str, group: &str, input: usize, hidden: usize, out: usize) -> MlpIdx {
        MlpIdx {
            w1: self.weight(format!("{prefix}.w1"), group, input, hidden),
            b1: self.add(format!("{prefix}.b1"), group, 1, hidden, Init::Zeros),
            w2: self.weight(format!("{prefix}.w2"), group, hidden, hidden),
            b2: self.add(format!("{prefix}.b2"), group, 1, hidden, Init::Zeros),
            w3: self.weight(format!("{prefix}.w3"), group, hidden, out),
            b3: self.add(format!("{prefix}.b3"), group, 1, out, Init::Zeros),
            out,
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let mut b = Builder { tensors: Vec::new(), total: 0 };
        let embed_w = b.weight("embed.w".into(), "embedding", cfg.channels, d);
        let embed_b = b.add("embed.b".into(), "embedding", 1, d, Init::Zeros);
        let mut layers = Vec::with_capacity(cfg.n_encoder_layers);
        for l in 0..cfg.n_encoder_layers {
            let attn = format!("encoder{l}.attention");
            let ffn = format!("encoder{l}.ffn");
            let p = |s: &str| format!("encoder{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: b.add(p("ln1.g"), &attn, 1, d, Init::Ones),
                ln1_b: b.add(p("ln1.b"), &attn, 1, d, Init::Zeros),
                wq: b.weight(p("attn.wq"), &attn, d, d),
                bq: b.add(p("attn.bq"), &attn, 1, d, Init::Zeros),
                wk: b.weight(p("attn.wk"), &attn, d, d),
                bk: b.add(p("attn.bk"), &attn, 1, d, Init::Zeros),
                wv: b.weight(p("attn.wv"), &attn, d, d),
                bv: b.add(p("attn.bv"), &attn, 1, d, Init::Zeros),
                wo: b.weight(p("attn.wo"), &attn, d, d),
                bo: b.add(p("attn.bo"), &attn, 1, d, Init::Zeros),
                ln2_g: b.add(p("ln2.g"), &ffn, 1, d, Init::Ones),
                ln2_b: b.add(p("ln2.b"), &ffn, 1, d, Init::Zeros),
                w1: b.weight(p("ffn.w1"), &ffn, d, cfg.ffn_width),
                b1: b.add(p("ffn.b1"), &ffn, 1, cfg.ffn_width, Init::Zeros),
                w2: b.weight(p("ffn.w2"), &ffn, cfg.ffn_width, d),
                b2: b.add(p("ffn.b2"), &ffn, 1, d, Init::Zeros),
            });
        }
        let lnf_g = b.add("final_norm.g".into(), "final_norm", 1, d, Init::Ones);
        let lnf_b = b.add("final_norm.b".into(), "final_norm", 1, d, Init::Zeros);
        let mut rules = Vec::with_capacity(cfg.rule_heads.len());
        for id in &cfg.rule_heads {
            let attn = format!("rule[{id}].attention");
            let cls = format!("rule[{id}].classifier");
            let fc = format!("rule[{id}].forecaster");
            rules.push(RuleIdx {
                query: b.weight(format!("rule[{id}].query"), &attn, 1, d),
                wk: b.weight(format!("rule[{id}].wk"), &attn, d, d),
                bk: b.add(format!("rule[{id}].bk"), &attn, 1, d, Init::Zeros),
                wv: b.weight(format!("rule[{id}].wv"), &attn, d, d),
                bv: b.add(format!("rule[{id}].bv"), &attn, 1, d, Init::Zeros),
                classifier: b.mlp(&format!("rule[{id}].classifier"), &cls, d, cfg.head_hidden, 3),
                forecaster: b.mlp(&format!("rule[{id}].forecaster"), &fc, d, cfg.head_hidden, 1),
            });
        }
        Layout {
            tensors: b.tensors,
            total: b.total,
            index: Index { embed_w, embed_b, layers, lnf_g, lnf_b, rules },
        }
    }

    /// Group names in layout order.
    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for t in &self.tensors {
            if groups.last() != Some(&t.group) {
                groups.push(t.group.clone());
            }
        }
        groups
    }

    pub fn group_tensors<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a TensorSpec> + 'a {
        self.tensors.iter().filter(move |t| t.group == group)
    }

    pub fn group_size(&self, group: &str) -> usize {
        self.group_tensors(group).map(TensorSpec::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Groups owned by one rule head.
    pub fn rule_groups(rule_id: &str) -> [String; 3] {
        [
            format!("rule[{rule_id}].attention"),
            format!("rule[{rule_id}].classifier"),
            format!("rule[{rule_id}].forecaster"),
        ]
    }
}
