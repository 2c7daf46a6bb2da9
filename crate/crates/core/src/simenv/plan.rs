use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Left,
    Right,
    Both,
}

impl Arm {
    /// Index into the world's arm array; `None` for bimanual subtasks.
    pub fn index(self) -> Option<usize> {
        match self {
            Arm::Left => Some(0),
            Arm::Right => Some(1),
            Arm::Both => None,
        }
    }
}

/// What finishes a subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Target {
    /// One more item of this kind placed in the container.
    Item { item_kind: usize },
    /// Container lid closed with both arms.
    CloseContainer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub prompt_id: usize,
    pub prompt_text: String,
    pub target: Target,
    pub arm: Arm,
}

/// One position of a plan, resolved: the subtask plus how many items of its
/// kind must be placed once it is done (2 for the second of two repeats).
#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub subtask: SubtaskSpec,
    pub required: usize,
}

impl Goal {
    pub fn single(subtask: SubtaskSpec) -> Self {
        Self {
            subtask,
            required: 1,
        }
    }
}

/// A task family: items on the table, distinct subtasks and their ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub name: String,
    pub task_prompt: String,
    pub item_kinds: Vec<String>,
    /// Kind index of every physical item, in world order.
    pub items: Vec<usize>,
    /// Distinct subtasks; `subtasks[i].prompt_id == i`.
    pub subtasks: Vec<SubtaskSpec>,
    /// Execution order as indices into `subtasks`; repeats allowed.
    pub sequence: Vec<usize>,
}

fn item_subtask(prompt_id: usize, kind: usize, name: &str, arm: Arm) -> SubtaskSpec {
    SubtaskSpec {
        prompt_id,
        prompt_text: format!("Pick up the {name}"),
        target: Target::Item { item_kind: kind },
        arm,
    }
}

impl TaskPlan {
    /// Six foods loaded in order (left arm for the first two), then a
    /// bimanual container close.
    pub fn salad() -> Self {
        let foods = ["spinach", "coleslaw", "meatball", "chicken", "tomato", "sauce cup"];
        let mut subtasks: Vec<SubtaskSpec> = foods
            .iter()
            .enumerate()
            .map(|(i, f)| item_subtask(i, i, f, if i < 2 { Arm::Left } else { Arm::Right }))
            .collect();
        subtasks.push(SubtaskSpec {
            prompt_id: 6,
            prompt_text: "Close the container".into(),
            target: Target::CloseContainer,
            arm: Arm::Both,
        });
        Self {
            name: "salad".into(),
            task_prompt: "Pack the salad".into(),
            item_kinds: foods.iter().map(|s| s.to_string()).collect(),
            items: (0..6).collect(),
            subtasks,
            sequence: (0..7).collect(),
        }
    }

    /// Gummies, kinder twice, snickers twice, lollipop: four distinct
    /// subtasks over a six-step sequence.
    pub fn candy() -> Self {
        let kinds = ["gummies", "kinder", "snickers", "lollipop"];
        let arms = [Arm::Left, Arm::Left, Arm::Right, Arm::Right];
        let subtasks = kinds
            .iter()
            .zip(arms)
            .enumerate()
            .map(|(i, (k, arm))| item_subtask(i, i, k, arm))
            .collect();
        Self {
            name: "candy".into(),
            task_prompt: "Pack the candy".into(),
            item_kinds: kinds.iter().map(|s| s.to_string()).collect(),
            items: vec![0, 1, 1, 2, 2, 3],
            subtasks,
            sequence: vec![0, 1, 1, 2, 2, 3],
        }
    }

    pub fn by_name(name: &str) -> Result<Self, SimError> {
        match name {
            "salad" => Ok(Self::salad()),
            "candy" => Ok(Self::candy()),
            other => Err(SimError::UnknownPlan(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidPlan(m));
        if self.sequence.is_empty() {
            return bad("empty sequence".into());
        }
        for (i, s) in self.subtasks.iter().enumerate() {
            if s.prompt_id != i {
                return bad(format!("subtask {i} has prompt id {}", s.prompt_id));
            }
            match (s.target, s.arm) {
                (Target::CloseContainer, Arm::Both) => {}
                (Target::CloseContainer, _) | (_, Arm::Both) => {
                    return bad(format!("`{}`: only container closing is bimanual", s.prompt_text))
                }
                (Target::Item { item_kind }, _) if item_kind >= self.item_kinds.len() => {
                    return bad(format!("`{}`: unknown item kind", s.prompt_text))
                }
                _ => {}
            }
        }
        if let Some(&bad_ix) = self.sequence.iter().find(|&&i| i >= self.subtasks.len()) {
            return bad(format!("sequence references subtask {bad_ix}"));
        }
        for (i, goal) in (0..self.len()).map(|i| (i, self.goal(i))) {
            if let Target::Item { item_kind } = goal.subtask.target {
                let available = self.items.iter().filter(|&&k| k == item_kind).count();
                if goal.required > available {
                    return bad(format!("step {i} needs {} items of kind {item_kind}", goal.required));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// Prompt vocabulary: every distinct subtask prompt plus the task-level prompt.
    pub fn n_prompts(&self) -> usize {
        self.subtasks.len() + 1
    }

    pub fn task_prompt_id(&self) -> usize {
        self.subtasks.len()
    }

    pub fn step(&self, index: usize) -> &SubtaskSpec {
        &self.subtasks[self.sequence[index]]
    }

    pub fn goal(&self, index: usize) -> Goal {
        let sub = self.sequence[index];
        let required = self.sequence[..=index].iter().filter(|&&s| s == sub).count();
        Goal {
            subtask: self.subtasks[sub].clone(),
            required,
        }
    }

    /// Plan positions at which subtask `sub` is executed.
    pub fn positions_of(&self, sub: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sequence[i] == sub).collect()
    }

    pub fn prompt_sequence(&self) -> Vec<usize> {
        self.sequence.iter().map(|&s| self.subtasks[s].prompt_id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_plans_validate() {
        TaskPlan::salad().validate().unwrap();
        TaskPlan::candy().validate().unwrap();
    }

    #[test]
    fn salad_structure() {
        let p = TaskPlan::salad();
        assert_eq!(p.subtasks.len(), 7);
        assert_eq!(p.len(), 7);
        assert_eq!(p.step(0).prompt_text, "Pick up the spinach");
        assert_eq!(p.step(0).arm, Arm::Left);
        assert_eq!(p.step(1).arm, Arm::Left);
        assert!((2..6).all(|i| p.step(i).arm == Arm::Right));
        assert_eq!(p.step(6).arm, Arm::Both);
        assert_eq!(p.n_prompts(), 8);
    }

    #[test]
    fn candy_repeats_are_consecutive_pairs() {
        let p = TaskPlan::candy();
        assert_eq!(p.subtasks.len(), 4);
        assert_eq!(p.len(), 6);
        let kinder = 1;
        let snickers = 2;
        assert_eq!(p.positions_of(kinder), vec![1, 2]);
        assert_eq!(p.positions_of(snickers), vec![3, 4]);
        assert_eq!(p.goal(1).required, 1);
        assert_eq!(p.goal(2).required, 2);
        assert_eq!(p.goal(4).required, 2);
        assert_eq!(p.step(1).prompt_text, "Pick up the kinder");
    }

    #[test]
    fn invalid_plans_rejected() {
        let mut p = TaskPlan::salad();
        p.sequence.clear();
        assert!(p.validate().is_err());

        let mut p = TaskPlan::salad();
        p.subtasks[0].arm = Arm::Both;
        assert!(p.validate().is_err());

        let mut p = TaskPlan::candy();
        p.sequence = vec![1, 1, 1];
        assert!(p.validate().is_err(), "only two kinder items exist");

        assert!(TaskPlan::by_name("soup").is_err());
    }
}
