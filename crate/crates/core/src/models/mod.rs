//! The bagged global ensemble, the category-gated distributed model and the
//! Saffir-Simpson taxonomy they share.

mod category;
mod distributed;
mod ensemble;

pub use self::category::{categorize, expert_range, expert_ranges, OverlapPolicy, SaffirSimpsonCategory, SpeedRange};
pub use self::distributed::{train_experts, DistributedModel, ExpertTraining, Routing};
pub use self::ensemble::{bootstrap_subsets, bootstrap_train_ensemble, member_seed, EnsembleTraining, GlobalEnsemble};
