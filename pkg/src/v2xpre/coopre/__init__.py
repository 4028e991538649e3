"""Cooperative masked-reconstruction pretraining: encoder, decoder, objective, loop."""
from v2xpre.coopre.loss import chamfer, chamfer_batch, recon_loss
from v2xpre.coopre.model import EncoderConfig, PillarEncoder, Pillars, ReconDecoder, pillarize
from v2xpre.coopre.pretrain import PretrainAbort, PretrainConfig, PretrainResult, pretrain
