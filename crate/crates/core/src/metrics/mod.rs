//! Calibration and segmentation metrics.

mod bins;
mod dice;
mod distribution;
mod significance;
mod wilcoxon;

pub use bins::{
    bins_from_probabilities, ece, ece_report, reliability_bins, BinInput, ConfidenceMode, EceReport,
    PredictionInput, ReliabilityBins, SubjectTally, DEFAULT_BINS,
};
pub use dice::dice_score;
pub use distribution::{quantile, subject_bin_distribution, BinDistribution, BinSummary, SubjectAccuracy, DEFAULT_MIN_BIN_COUNT};
pub use significance::{best_marking, BestMarking, Direction};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};
