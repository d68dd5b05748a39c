//! Layer-wise fine-tuning schedule.
//!
//! Stage 0 trains only the head; each later stage unfreezes the next group
//! towards the input. Stages past the point where every group is trainable stay
//! fully unfrozen.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::RESNET50_GROUPS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneStage {
    pub stage_index: usize,
    pub trainable_groups: BTreeSet<String>,
}

impl FineTuneStage {
    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable_groups.contains(group)
    }
}

/// Schedule over the ResNet-50 groups (stem, block1..block4, head).
pub fn freeze_schedule(total_stages: usize) -> Vec<FineTuneStage> {
    freeze_schedule_for(&RESNET50_GROUPS, total_stages)
}

/// Schedule over arbitrary input-to-output ordered groups; the last one is the head.
///
/// # Panics
/// If `total_stages` is zero or `groups` is empty.
pub fn freeze_schedule_for<S: AsRef<str>>(groups: &[S], total_stages: usize) -> Vec<FineTuneStage> {
    assert!(total_stages >= 1, "a schedule needs at least one stage");
    assert!(!groups.is_empty(), "a network needs at least a head group");
    let mut trainable = BTreeSet::new();
    let mut deepest_first = groups.iter().rev();
    (0..total_stages)
        .map(|stage_index| {
            // stage 0 adds the head; once every group is in, later stages repeat the full set
            if let Some(g) = deepest_first.next() {
                trainable.insert(g.as_ref().to_string());
            }
            FineTuneStage {
                stage_index,
                trainable_groups: trainable.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(stage: &FineTuneStage) -> Vec<&str> {
        stage.trainable_groups.iter().map(String::as_str).collect()
    }

    #[test]
    fn single_stage_is_head_only() {
        let s = freeze_schedule(1);
        assert_eq!(s.len(), 1);
        assert_eq!(names(&s[0]), ["head"]);
    }

    #[test]
    fn three_stages_unfold() {
        let s = freeze_schedule(3);
        assert_eq!(names(&s[0]), ["head"]);
        assert_eq!(names(&s[1]), ["block4", "head"]);
        assert_eq!(names(&s[2]), ["block3", "block4", "head"]);
    }

    #[test]
    fn six_stages_unfreeze_everything() {
        let s = freeze_schedule(6);
        assert_eq!(s[5].trainable_groups.len(), 6);
        for g in RESNET50_GROUPS {
            assert!(s[5].is_trainable(g));
        }
    }

    #[test]
    fn extra_stages_clamp_to_full() {
        let s = freeze_schedule_for(&["stem", "block1", "block2", "head"], 6);
        assert_eq!(s.len(), 6);
        assert_eq!(s[3].trainable_groups.len(), 4);
        assert_eq!(
            s[4],
            FineTuneStage {
                stage_index: 4,
                ..s[3].clone()
            }
        );
        assert_eq!(s[5].trainable_groups, s[3].trainable_groups);
    }

    #[test]
    fn stages_are_nested() {
        for n in 1..9 {
            let s = freeze_schedule(n);
            for w in s.windows(2) {
                assert!(w[0].trainable_groups.is_subset(&w[1].trainable_groups));
            }
            assert!(s.iter().enumerate().all(|(i, st)| st.stage_index == i));
        }
    }
}
