//! Datasets, class-incremental scenarios and rehearsal memory.

mod cifar;
mod dataset;
mod loader;
mod memory;
mod scenario;
mod synthetic;

pub use cifar::{load_cifar100_binary, parse_cifar100, RECORD_LEN};
pub use dataset::LabeledDataset;
pub use loader::{task_loader, TaskStream};
pub use memory::{herding_select, l2_normalize, RehearsalMemory};
pub use scenario::{build_scenario, ClassIncrementalScenario};
pub use synthetic::{gen_synthetic, gen_synthetic_split, Split, SyntheticBlobConfig};
