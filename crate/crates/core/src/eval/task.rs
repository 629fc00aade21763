use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// How instances are laid out as demonstrations and queries.
///
/// A demonstration reads `{input_prefix}{context}{answer_prefix} {option}`
/// and demonstrations are joined with `separator`. Options always carry one
/// leading space so their tokens split cleanly from the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Template {
    pub input_prefix: String,
    pub answer_prefix: String,
    pub separator: String,
}

impl Default for Template {
    fn default() -> Self {
        Self {
            input_prefix: "Question: ".into(),
            answer_prefix: "\nAnswer:".into(),
            separator: "\n\n".into(),
        }
    }
}

impl Template {
    pub fn question_answer() -> Self {
        Self::default()
    }

    pub fn input_type() -> Self {
        Self {
            input_prefix: "input: ".into(),
            answer_prefix: "\ntype:".into(),
            separator: "\n\n".into(),
        }
    }

    pub fn context_answer() -> Self {
        Self {
            input_prefix: "Context: ".into(),
            answer_prefix: "\nAnswer:".into(),
            separator: "\n\n".into(),
        }
    }

    pub fn option_text(&self, option: &str) -> String {
        format!(" {option}")
    }

    pub fn demonstration(&self, inst: &Instance) -> String {
        format!(
            "{}{}",
            self.query(&inst.context),
            self.option_text(&inst.options[inst.gold])
        )
    }

    /// The query part that precedes an option.
    pub fn query(&self, context: &str) -> String {
        format!("{}{}{}", self.input_prefix, context, self.answer_prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub context: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Data(format!(
                "instance {:?} has fewer than 2 options",
                self.context
            )));
        }
        if self.gold >= self.options.len() {
            return Err(Error::Data(format!("gold index {} out of range", self.gold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTask {
    pub name: String,
    #[serde(default)]
    pub template: Template,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl ClassificationTask {
    pub fn validate(&self) -> Result<()> {
        self.train.iter().chain(&self.test).try_for_each(Instance::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let task: Self = serde_json::from_str(&text)?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub task: String,
    pub seed: u64,
    pub demonstrations: Vec<String>,
    pub total_tokens: usize,
    pub budget_tokens: usize,
}

impl DemonstrationSet {
    pub fn text(&self, template: &Template) -> String {
        self.demonstrations.join(&template.separator)
    }
}

/// Shuffles the training split by `seed` and appends demonstrations while
/// the running token total is below `budget_tokens`. At least one
/// demonstration is always taken.
pub fn build_demo_set(
    task: &ClassificationTask,
    budget_tokens: usize,
    seed: u64,
    tokenizer: &dyn Tokenizer,
) -> Result<DemonstrationSet> {
    if task.train.is_empty() {
        return Err(Error::config(
            "task.train",
            format!("task {} has no training split", task.name),
        ));
    }
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sep_len = tokenizer.encode(&task.template.separator).len();
    let mut demonstrations = Vec::new();
    let mut total = 0;
    for i in order {
        if total >= budget_tokens && !demonstrations.is_empty() {
            break;
        }
        let demo = task.template.demonstration(&task.train[i]);
        let len = tokenizer.encode(&demo).len() + if demonstrations.is_empty() { 0 } else { sep_len };
        total += len;
        demonstrations.push(demo);
    }
    Ok(DemonstrationSet {
        task: task.name.clone(),
        seed,
        demonstrations,
        total_tokens: total,
        budget_tokens,
    })
}
