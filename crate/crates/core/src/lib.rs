//! Intermediate-domain regularization for domain adaptive detection at desk
//! scale: a dynamic source/translated blending schedule, soft domain labels,
//! a mixed-domain adversarial loss realized with gradient reversal, and the
//! synthetic fog benchmark used to exercise them.

pub mod ablation;
pub mod adaptation;
pub mod autodiff;
pub mod dataset;
pub mod imaging;
pub mod schedule;
