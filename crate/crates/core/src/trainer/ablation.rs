use std::fmt;
use std::str::FromStr;

use super::{Stage, TrainConfig};
use crate::{Error, Result};

/// Model variants used to measure each component's contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// No contrastive pre-training; fine-tuning starts from random weights.
    WithoutCoarseFine,
    WithoutCoarse,
    WithoutFine,
    /// Every objective optimized jointly in one stage.
    MultiTask,
    /// Conversation view removed from the contrastive objectives.
    WithoutConversation,
    /// Knowledge-graph view removed from contrastive objectives and decoder memory.
    WithoutGraph,
    /// Review view removed from contrastive objectives and decoder memory.
    WithoutReviews,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::WithoutCoarseFine,
        Variant::WithoutCoarse,
        Variant::WithoutFine,
        Variant::MultiTask,
        Variant::WithoutConversation,
        Variant::WithoutGraph,
        Variant::WithoutReviews,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCoarseFine => "w/o Coarse-Fine",
            Variant::WithoutCoarse => "w/o Coarse",
            Variant::WithoutFine => "w/o Fine",
            Variant::MultiTask => "Multi-task",
            Variant::WithoutConversation => "w/o CH",
            Variant::WithoutGraph => "w/o SD",
            Variant::WithoutReviews => "w/o UD",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Case-insensitive; `w/o`, `wo` and `without` prefixes and any of
    /// space, `-`, `_` as separators are accepted.
    fn from_str(s: &str) -> Result<Self> {
        let mut key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_' | '/'))
            .collect();
        for prefix in ["without", "wo"] {
            if let Some(rest) = key.strip_prefix(prefix) {
                key = format!("no{rest}");
                break;
            }
        }
        Ok(match key.as_str() {
            "full" | "c2crs" => Variant::Full,
            "nocoarsefine" => Variant::WithoutCoarseFine,
            "nocoarse" => Variant::WithoutCoarse,
            "nofine" => Variant::WithoutFine,
            "multitask" => Variant::MultiTask,
            "noch" | "noconversation" => Variant::WithoutConversation,
            "nosd" | "nograph" => Variant::WithoutGraph,
            "noud" | "noreviews" | "noreview" => Variant::WithoutReviews,
            _ => return Err(Error::Config(format!("unknown ablation variant {s:?}"))),
        })
    }
}

/// Returns `config` with the variant's stage or view removed.
pub fn ablate(config: &TrainConfig, variant: Variant) -> TrainConfig {
    let mut c = config.clone();
    let drop = |c: &mut TrainConfig, stages: &[Stage]| c.train.schedule.retain(|s| !stages.contains(s));
    match variant {
        Variant::Full => {}
        Variant::WithoutCoarseFine => drop(&mut c, &[Stage::PretrainCoarse, Stage::PretrainFine]),
        Variant::WithoutCoarse => drop(&mut c, &[Stage::PretrainCoarse]),
        Variant::WithoutFine => drop(&mut c, &[Stage::PretrainFine]),
        Variant::MultiTask => c.train.schedule = vec![Stage::MultiTask],
        Variant::WithoutConversation => c.model.views.conversation = false,
        Variant::WithoutGraph => c.model.views.graph = false,
        Variant::WithoutReviews => c.model.views.review = false,
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_names_and_slugs() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("wo-coarse-fine".parse::<Variant>().unwrap(), Variant::WithoutCoarseFine);
        assert_eq!("without_ud".parse::<Variant>().unwrap(), Variant::WithoutReviews);
        assert!("w/o everything".parse::<Variant>().is_err());
    }

    #[test]
    fn schedules() {
        let base = TrainConfig::default();
        let s = |v| ablate(&base, v).train.schedule;
        assert_eq!(s(Variant::WithoutCoarseFine), vec![Stage::FinetuneRec, Stage::FinetuneConv]);
        assert_eq!(
            s(Variant::WithoutFine),
            vec![Stage::PretrainCoarse, Stage::FinetuneRec, Stage::FinetuneConv]
        );
        assert_eq!(
            s(Variant::WithoutCoarse),
            vec![Stage::PretrainFine, Stage::FinetuneRec, Stage::FinetuneConv]
        );
        assert_eq!(s(Variant::MultiTask), vec![Stage::MultiTask]);
        assert_eq!(s(Variant::Full), base.train.schedule);
    }

    #[test]
    fn view_switches() {
        let base = TrainConfig::default();
        let ud = ablate(&base, Variant::WithoutReviews);
        assert!(!ud.model.views.review && ud.model.views.graph && ud.model.views.conversation);
        assert_eq!(ud.train.schedule, base.train.schedule);
        assert!(!ablate(&base, Variant::WithoutGraph).model.views.graph);
        assert!(!ablate(&base, Variant::WithoutConversation).model.views.conversation);
    }
}
