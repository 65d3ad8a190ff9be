//! Statistics for the trace analyses: exact binomial tail, Pearson correlation, t-tests,
//! nearest-rank quantiles and ROUGE-L.

pub mod analysis;
mod hypothesis;
mod rouge;

pub use analysis::{
    analyze, group_analysis, parse_scores, render_report, synchronized_insertion_analysis, AnalysisReport, GroupReport,
    ResponseScorePair, SyncAnalysis,
};
pub use hypothesis::{binom_test_one_sided, pearson, t_test_two_sample, upper_quantile, TTestVariant};
pub use rouge::{lcs_len, rouge_l_f};
