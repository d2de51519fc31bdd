//! Clinical records, label rules, pair and future-timepoint datasets, and
//! patient-level splits.

mod labels;
mod records;
mod split;

pub use labels::{
    build_future_dataset, enumerate_pairs, klg_class, pain_label, pair_examples, prog_jsw, prog_klg, single_examples,
    write_examples_jsonl, FutureDataset, LabeledExample, Task, JSW_DROP_MM, MIN_JSW_INTERVAL, PAIN_THRESHOLD,
};
pub use records::{parse_clinical_csv, read_clinical_csv, write_clinical_csv, ClinicalRecord, KneeKey, Side};
pub use split::{assign_splits, split_counts, split_patients, Split};
