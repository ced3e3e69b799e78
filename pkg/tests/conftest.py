import pytest
import torch

from oietd.corpus import Sentence
from oietd.synth import SynthConfig, generate_pair

torch.set_num_threads(1)

SMALL_ENCODER = {"kind": "toy", "hidden_size": 16, "n_buckets": 256, "n_heads": 2}


@pytest.fixture(scope="session")
def small_pair():
    return generate_pair(SynthConfig(n_train=80, n_valid=30, n_test=30, seed=3))


@pytest.fixture
def sentences():
    return [
        Sentence("a", "d", ("Robbers", "broke", "into", "the", "bank"), ((1, 2),), ((1, 3),)),
        Sentence("b", "d", ("Markets", "fell"), ((1, 2),), ()),
        Sentence("c", "d", ("Nothing", "happened", "at", "all", "today", "."), (), ((1, 2),)),
    ]


def tiny_roberta():
    """A randomly initialised one-layer RoBERTa with an in-memory BPE vocabulary."""
    from tokenizers import ByteLevelBPETokenizer
    from tokenizers.processors import RobertaProcessing
    from transformers import PreTrainedTokenizerFast, RobertaConfig, RobertaForMaskedLM

    bpe = ByteLevelBPETokenizer(add_prefix_space=True)
    bpe.train_from_iterator(["Robbers broke into the bank on Monday", "markets fell sharply"] * 10, vocab_size=300,
                            special_tokens=["<s>", "<pad>", "</s>", "<unk>", "<mask>"])
    bpe._tokenizer.post_processor = RobertaProcessing(("</s>", bpe.token_to_id("</s>")),
                                                      ("<s>", bpe.token_to_id("<s>")), add_prefix_space=True)
    tok = PreTrainedTokenizerFast(tokenizer_object=bpe._tokenizer, bos_token="<s>", eos_token="</s>",
                                  unk_token="<unk>", pad_token="<pad>", mask_token="<mask>", add_prefix_space=True)
    torch.manual_seed(0)
    cfg = RobertaConfig(vocab_size=len(tok), hidden_size=32, num_hidden_layers=1, num_attention_heads=2,
                        intermediate_size=64, pad_token_id=tok.pad_token_id, max_position_embeddings=300)
    return RobertaForMaskedLM(cfg), tok


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    lines = test_acceptance.RESULTS
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
