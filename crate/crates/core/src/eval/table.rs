use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::McqItem;
use crate::lm::SequenceLoglik;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLik {
    pub label: String,
    pub plus: SequenceLoglik,
    pub minus: SequenceLoglik,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLik {
    pub item_id: String,
    pub choices: Vec<ChoiceLik>,
}

/// Per-item, per-choice log-likelihoods under both heads.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LikelihoodTable {
    pub items: Vec<ItemLik>,
}

/// One JSONL line of the external table format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub item_id: String,
    pub choice_label: String,
    pub l_plus_total: f64,
    pub l_plus_per_char: f64,
    pub l_minus_total: f64,
    pub l_minus_per_char: f64,
    /// Optional; per-character values stand in when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_plus_per_byte: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_minus_per_byte: Option<f64>,
}

impl LikelihoodTable {
    /// Choice likelihoods for each item, in the item's choice order.
    /// Every uncovered item is listed in the error.
    pub fn align<'a>(&'a self, items: &[McqItem]) -> Result<Vec<Vec<&'a ChoiceLik>>, EvalError> {
        let by_id: HashMap<&str, &ItemLik> = self.items.iter().map(|i| (i.item_id.as_str(), i)).collect();
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(items.len());
        for it in items {
            let found = by_id.get(it.id.as_str()).and_then(|lik| {
                it.choices
                    .iter()
                    .map(|c| lik.choices.iter().find(|l| l.label == c.label))
                    .collect::<Option<Vec<_>>>()
            });
            match found {
                Some(v) => out.push(v),
                None => missing.push(it.id.clone()),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(EvalError::MissingEntries(missing))
        }
    }

    /// Pairs the positive-side likelihoods of `plus` with the positive-side
    /// likelihoods of `minus`, which was computed with the negative head.
    pub fn combine(plus: &Self, minus: &Self) -> Result<Self, EvalError> {
        let mismatch = || EvalError::Contract("tables cover different items or choices".into());
        if plus.items.len() != minus.items.len() {
            return Err(mismatch());
        }
        let items = plus
            .items
            .iter()
            .zip(&minus.items)
            .map(|(p, m)| {
                if p.item_id != m.item_id || p.choices.len() != m.choices.len() {
                    return Err(mismatch());
                }
                let choices = p
                    .choices
                    .iter()
                    .zip(&m.choices)
                    .map(|(a, b)| {
                        if a.label != b.label {
                            return Err(mismatch());
                        }
                        Ok(ChoiceLik {
                            label: a.label.clone(),
                            plus: a.plus,
                            minus: b.plus,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ItemLik {
                    item_id: p.item_id.clone(),
                    choices,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { items })
    }

    pub fn rows(&self) -> Vec<TableRow> {
        self.items
            .iter()
            .flat_map(|it| {
                it.choices.iter().map(|c| TableRow {
                    item_id: it.item_id.clone(),
                    choice_label: c.label.clone(),
                    l_plus_total: c.plus.total,
                    l_plus_per_char: c.plus.per_char,
                    l_minus_total: c.minus.total,
                    l_minus_per_char: c.minus.per_char,
                    l_plus_per_byte: Some(c.plus.per_byte),
                    l_minus_per_byte: Some(c.minus.per_byte),
                })
            })
            .collect()
    }

    /// Groups rows by item id, keeping first-appearance order.
    pub fn from_rows(rows: Vec<TableRow>) -> Self {
        let mut items: Vec<ItemLik> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for r in rows {
            let slot = *index.entry(r.item_id.clone()).or_insert_with(|| {
                items.push(ItemLik {
                    item_id: r.item_id.clone(),
                    choices: Vec::new(),
                });
                items.len() - 1
            });
            items[slot].choices.push(ChoiceLik {
                label: r.choice_label,
                plus: SequenceLoglik {
                    total: r.l_plus_total,
                    per_char: r.l_plus_per_char,
                    per_byte: r.l_plus_per_byte.unwrap_or(r.l_plus_per_char),
                },
                minus: SequenceLoglik {
                    total: r.l_minus_total,
                    per_char: r.l_minus_per_char,
                    per_byte: r.l_minus_per_byte.unwrap_or(r.l_minus_per_char),
                },
            });
        }
        Self { items }
    }
}

pub fn write_table_jsonl(path: &Path, table: &LikelihoodTable) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in table.rows() {
        let line = serde_json::to_string(&r).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_table_jsonl(path: &Path) -> Result<LikelihoodTable, EvalError> {
    let text = fs::read_to_string(path)?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TableRow>(l).map_err(|e| EvalError::Table {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LikelihoodTable::from_rows(rows))
}
