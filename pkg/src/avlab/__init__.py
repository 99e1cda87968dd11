"""avlab: deterministic desk-scale audio-visual masked-prediction pretraining,
noise-augmented seq2seq finetuning, and noise-type x SNR WER evaluation."""

__version__ = "0.1.0"
