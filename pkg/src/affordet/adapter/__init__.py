from .embed import build_prompt, build_visual_embedding, prompt_tokens, roi_align
from .heads import Adapter, AdapterRefinement, gate_map
from .lm import LanguageModel, LoRALinear, TinyLM, Tokenizer, merge_lora
from .refine import TopKSelection, adapter_losses, match_entries, refine, select_topk, smooth_l1

__all__ = [
    "Adapter",
    "AdapterRefinement",
    "LanguageModel",
    "LoRALinear",
    "TinyLM",
    "Tokenizer",
    "TopKSelection",
    "adapter_losses",
    "build_prompt",
    "build_visual_embedding",
    "gate_map",
    "match_entries",
    "merge_lora",
    "prompt_tokens",
    "refine",
    "roi_align",
    "select_topk",
    "smooth_l1",
]
