//! Tasks, splits, episodic instance construction and CSV interchange.

mod episodes;
mod io;
mod task;

pub use episodes::{
    full_support_batch, make_meta_instances, realized_ratio, task_instances, Augmentation,
    EpisodeConfig, FeatureMap,
    InstanceSpec,
};
pub(crate) use episodes::sample_support;
pub use io::{
    load_tasks, read_meta_split, read_task_split, render_task_csv, render_task_split,
    write_meta_split, write_task_csv, write_task_split, FormatDescriptor,
};
pub use task::{make_test_split, EvalTask, MetaSplit, NormStats, Task, TaskSplit};
