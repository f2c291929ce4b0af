"""Natural-language user profiles for next-POI recommendation."""

from .ingest import BoundaryPolygon, CheckIn, Dataset, filter_by_boundary, parse_checkin_file
from .sessionize import DatasetSplits, SplitSpec, Trajectory, filter_sessions, split
from .profiler import UserProfile, build_profile_prompt, generate_profile, profile_distribution_report
from .judge import JudgeScore, aggregate_judge_scores, judge_profile
from .promptgen import SFTExample, SystemPromptConfig, build_sft_example, build_system_prompt, inject_preference
from .evaluation import accuracy_at_1, parse_prediction
from .trajsim import dtw_distance, rank_similar

__version__ = "0.1.0"
