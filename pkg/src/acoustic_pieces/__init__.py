"""Discrete acoustic codes, merged code pieces, and a toy masked-prediction probe.

The pipeline: read 16 kHz audio, compute 20 ms MFCC frames, cluster them into
discrete codes, merge frequent code patterns into pieces, remap pieces to
frame-level labels, score segmentations against phone alignments, and train a
small transformer on the labels with CTC fine-tuning and LM-fused decoding.
"""

from .features import (AudioBuffer, FeatureMatrix, MfccConfig, compute_mfcc,
                       load_features, read_wav, save_features, write_wav_pcm16)
from .quantizer import (Codebook, CodeSequence, KMeansConfig, assign,
                        kmeans_fit, load_codebook, load_code_sequences,
                        save_codebook, save_code_sequences)
from .pieces import (ApConfig, FrameLabelSequence, PieceVocab, Segmentation,
                     encode, load_vocab, remap_frames, save_vocab, train_bpe)
from .evaluation import (AlignmentTier, BoundaryMetrics, SharingReport,
                         boundary_prf, corpus_boundary_prf, label_boundaries,
                         load_alignments, save_alignments, sharing_percentage)
from .synth import SynthConfig, synth_corpus
from .probe import (MaskSpec, ProbeConfig, ProbeParams, build_probe,
                    finetune_ctc, forward, hidden_states, load_probe,
                    loss_masked_ce, lr_schedule, pretrain, sample_spans,
                    save_probe)
from .decode import (DECODE_PRESETS, FusionWeights, NGramLM, arpa_load,
                     beam_search_fused, ctc_grad, ctc_loss, decode_preset,
                     greedy_decode, lm_logprob, load_arpa_file)

__version__ = "0.1.0"
