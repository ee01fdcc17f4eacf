use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub answer_key: String,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |msg: String| DataError::Invalid {
            id: self.id.clone(),
            msg,
        };
        if self.choices.len() < 2 {
            return Err(invalid(format!("{} choices, need at least 2", self.choices.len())));
        }
        if let Some(c) = self.choices.iter().find(|c| c.text.is_empty()) {
            return Err(invalid(format!("choice {} has empty text", c.label)));
        }
        let hits = self.choices.iter().filter(|c| c.label == self.answer_key).count();
        if hits != 1 {
            return Err(invalid(format!(
                "answer key `{}` matches {hits} choice labels",
                self.answer_key
            )));
        }
        Ok(())
    }

    /// Index of the correct choice. Assumes a validated item.
    pub fn answer_index(&self) -> usize {
        self.choices
            .iter()
            .position(|c| c.label == self.answer_key)
            .expect("validated item")
    }

    pub fn correct_text(&self) -> &str {
        &self.choices[self.answer_index()].text
    }

    /// Texts of every wrong choice, in order.
    pub fn wrong_texts(&self) -> impl Iterator<Item = &str> {
        let key = self.answer_key.clone();
        self.choices
            .iter()
            .filter(move |c| c.label != key)
            .map(|c| c.text.as_str())
    }
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a Value, DataError> {
    obj.get(name).ok_or_else(|| DataError::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })
}

fn as_str(v: &Value, what: &str, line: usize) -> Result<String, DataError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        // Some dumps store numeric labels and keys ("1".."4").
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(DataError::Parse {
            line,
            msg: format!("`{what}` is not a string"),
        }),
    }
}

fn parse_line(raw: &str, line: usize) -> Result<McqItem, DataError> {
    let obj: Value = serde_json::from_str(raw).map_err(|e| DataError::Parse {
        line,
        msg: e.to_string(),
    })?;
    let q = field(&obj, "question", line)?;
    // ARC nests the text and choices under `question`.
    let (question, choices_v) = match q {
        Value::Object(_) => (
            as_str(field(q, "stem", line)?, "question.stem", line)?,
            q.get("choices").or_else(|| obj.get("choices")),
        ),
        other => (as_str(other, "question", line)?, obj.get("choices")),
    };
    let choices_v = choices_v.ok_or_else(|| DataError::Parse {
        line,
        msg: "missing field `choices`".into(),
    })?;
    let choices = match choices_v {
        Value::Object(_) => {
            let texts = field(choices_v, "text", line)?.as_array();
            let labels = field(choices_v, "label", line)?.as_array();
            let (Some(texts), Some(labels)) = (texts, labels) else {
                return Err(DataError::Parse {
                    line,
                    msg: "`choices.text` and `choices.label` must be arrays".into(),
                });
            };
            if texts.len() != labels.len() {
                return Err(DataError::Parse {
                    line,
                    msg: format!("{} choice texts but {} labels", texts.len(), labels.len()),
                });
            }
            texts
                .iter()
                .zip(labels)
                .map(|(t, l)| {
                    Ok(Choice {
                        label: as_str(l, "choices.label", line)?,
                        text: as_str(t, "choices.text", line)?,
                    })
                })
                .collect::<Result<Vec<_>, DataError>>()?
        }
        Value::Array(list) => list
            .iter()
            .map(|c| {
                Ok(Choice {
                    label: as_str(field(c, "label", line)?, "label", line)?,
                    text: as_str(field(c, "text", line)?, "text", line)?,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?,
        _ => {
            return Err(DataError::Parse {
                line,
                msg: "`choices` must be an object or a list".into(),
            })
        }
    };
    let answer_key = as_str(field(&obj, "answerKey", line)?, "answerKey", line)?;
    let id = match obj.get("id") {
        Some(v) => as_str(v, "id", line)?,
        None => format!("line-{line}"),
    };
    let item = McqItem {
        id,
        question,
        choices,
        answer_key,
    };
    item.validate().map_err(|e| DataError::Parse {
        line,
        msg: e.to_string(),
    })?;
    Ok(item)
}

/// Parses ARC-style JSONL. Blank lines are skipped; line numbers are 1-based.
pub fn parse_mcq_jsonl(text: &str) -> Result<Vec<McqItem>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn load_mcq_jsonl(path: &Path) -> Result<Vec<McqItem>, DataError> {
    parse_mcq_jsonl(&fs::read_to_string(path)?)
}

/// Writes items in the flat ARC layout that [`load_mcq_jsonl`] reads back.
pub fn write_mcq_jsonl(path: &Path, items: &[McqItem]) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        let v = serde_json::json!({
            "id": it.id,
            "question": it.question,
            "choices": {
                "text": it.choices.iter().map(|c| &c.text).collect::<Vec<_>>(),
                "label": it.choices.iter().map(|c| &c.label).collect::<Vec<_>>(),
            },
            "answerKey": it.answer_key,
        });
        writeln!(out, "{v}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ARC_LINE: &str = r#"{"id": "Mercury_7175875", "question": {"stem": "Which substance is a compound?", "choices": [{"text": "sodium", "label": "A"}, {"text": "chlorine", "label": "B"}, {"text": "table salt", "label": "C"}, {"text": "salt water", "label": "D"}]}, "answerKey": "C"}"#;

    #[test]
    fn arc_nested_layout() {
        let items = parse_mcq_jsonl(ARC_LINE).unwrap();
        assert_eq!(items[0].question, "Which substance is a compound?");
        assert_eq!(items[0].correct_text(), "table salt");
        assert_eq!(items[0].wrong_texts().collect::<Vec<_>>(), ["sodium", "chlorine", "salt water"]);
    }

    #[test]
    fn flat_layout() {
        let line = r#"{"question": "What can a flower become?", "choices": {"text": ["a fruit", "a leaf"], "label": ["A", "B"]}, "answerKey": "A"}"#;
        let items = parse_mcq_jsonl(line).unwrap();
        assert_eq!(items[0].id, "line-1");
        assert_eq!(items[0].correct_text(), "a fruit");
    }

    #[test]
    fn empty_input() {
        assert!(parse_mcq_jsonl("").unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let bad_key = ARC_LINE.replace(r#""answerKey": "C""#, r#""answerKey": "E""#);
        let text = format!("{ARC_LINE}\n\n{bad_key}\n");
        match parse_mcq_jsonl(&text) {
            Err(DataError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("`E`"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let missing = r#"{"question": "q", "choices": {"text": ["a","b"], "label": ["A","B"]}}"#;
        match parse_mcq_jsonl(missing) {
            Err(DataError::Parse { line: 1, msg }) => assert!(msg.contains("answerKey")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_choice_rejected() {
        let line = r#"{"question": "q", "choices": {"text": ["a"], "label": ["A"]}, "answerKey": "A"}"#;
        assert!(parse_mcq_jsonl(line).is_err());
    }
}
