"""Fixtures: tiny random-weight causal LMs saved to disk for offline export."""

import pytest
import torch
from tokenizers import Regex, Tokenizer
from tokenizers.models import WordLevel
from tokenizers.pre_tokenizers import Split
from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast


def _char_tokenizer() -> PreTrainedTokenizerFast:
    vocab = {c: i for i, c in enumerate(map(chr, range(32, 127)))}
    vocab["<unk>"] = len(vocab)
    tok = Tokenizer(WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = Split(Regex("."), behavior="isolated")
    return PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>")


def _save_model(path, *, n_kv_heads):
    torch.manual_seed(1234)
    config = LlamaConfig(
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=n_kv_heads,
        vocab_size=128,
        max_position_embeddings=256,
    )
    LlamaForCausalLM(config).save_pretrained(path)
    _char_tokenizer().save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    return _save_model(tmp_path_factory.mktemp("tiny_mha"), n_kv_heads=4)


@pytest.fixture(scope="session")
def gqa_model_dir(tmp_path_factory):
    return _save_model(tmp_path_factory.mktemp("tiny_gqa"), n_kv_heads=2)
