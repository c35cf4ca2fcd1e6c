"""Semi-supervised sequence-to-sequence learning with data augmentation,
small enough to run and verify on a laptop CPU."""

from .augment import AugmentPolicy, preset, spec_augment
from .decode import BeamConfig, Hypothesis, beam_search, greedy_decode, hypothesis_score
from .metrics import ScoreReport, corpus_report, edit_distance_align, werr, wrr
from .model import (DecoderState, EncoderOutput, ModelConfig, ModelParams, decoder_step,
                    encode, forward_teacher_forced, init_params, load_checkpoint,
                    save_checkpoint)
from .pseudolabel import (LabelMatrix, PTRecord, fixmatch_labels, generate_pt_offline,
                          iterative_self_train_labels, load_pt_store, loop_filter,
                          noisy_student_labels, noisy_student_rounds, save_pt_store)
from .synthdata import (CorpusConfig, Dataset, UnlabeledView, Utterance, generate_corpus,
                        load_dataset, save_dataset, split_paper_protocol)
from .tensor import (ShapeError, Tensor, apply_primitive, backward,
                     finite_difference_check, no_grad)
from .train import (Batch, TrainConfig, TrainResult, early_stop, run_training,
                    smooth_labels, supervised_loss, train_step, unlabeled_loss)

__version__ = "0.1.0"
