"""Mine naturally occurring feedback from chat logs and turn it into training data."""

from .corpus import Conversation, FilterPolicy, Message, SchemaMap, apply_filters, ingest_jsonl
from .extractor import FeedbackRecord, RunReport, extract_conversation, run_pipeline
from .llm_client import EndpointConfig, GenerationParams, LLMClient
from .prompting import FeedbackCategory, Polarity, parse_category, polarity

__version__ = "0.1.0"

__all__ = [
    "Conversation",
    "EndpointConfig",
    "FeedbackCategory",
    "FeedbackRecord",
    "FilterPolicy",
    "GenerationParams",
    "LLMClient",
    "Message",
    "Polarity",
    "RunReport",
    "SchemaMap",
    "apply_filters",
    "extract_conversation",
    "ingest_jsonl",
    "parse_category",
    "polarity",
    "run_pipeline",
    "__version__",
]
