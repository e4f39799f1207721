"""Encoder-decoder vision transformer built on the tape engine.

Parameter names (ParamSet keys):

    patch_embed.{w,b}          (3P^2, D), (D,)
    cls_token                  (D,)
    blocks.NN.*                encoder block NN (see _block_shapes)
    norm.{g,b}                 final encoder norm
    decoder.mask_token         (D,)
    decoder.embed.{w,b}        (D, Dd), (Dd,)
    decoder.blocks.NN.*
    decoder.norm.{g,b}
    decoder.pred.{w,b}         (Dd, 3P^2), (3P^2,)
    head.{w,b}                 (D, C), (C,)
    probe.blocks.NN.*          blocks inserted for non-linear probing

Blocks are pre-norm: x + attn(norm1(x)), then x + mlp(norm2(x)). The class token carries no
position embedding; patch tokens use fixed 2-D sin-cos embeddings of their grid position.
"""

import logging
import math
import typing

import attr
import numpy as np

from pretext_eval.degrade.rng import Rng
from pretext_eval.engine import ParamSet, Tensor
from pretext_eval.engine import ops
from pretext_eval.util import GeometryError, ValidationError
from . import ViTConfig
from .patch_ops import sincos_pos_embed_array


_LOG = logging.getLogger(__name__)

ENCODER_PREFIXES = ('patch_embed.', 'cls_token', 'blocks.', 'norm.')
DECODER_PREFIXES = ('decoder.',)
HEAD_PREFIXES = ('head.',)
PROBE_PREFIXES = ('probe.',)

DEFAULT_PROBE_BLOCKS = 2


@attr.s(auto_attribs=True)
class TokenBatch:
  """Activations flowing through the transformer.

  Attributes
  ----------
  data : Tensor
      (B, T, D) activations; token 0 is the class token when has_cls.
  visible_index : Optional[np.ndarray]
      (B, V) grid positions of the patch tokens, in token order. None once the sequence covers
      the whole grid in grid order.
  grid : Tuple[int, int]
      Token grid of the full image.
  has_cls : bool
      Whether token 0 is the class token.
  """

  data : Tensor
  visible_index : typing.Optional[np.ndarray]
  grid : typing.Tuple[int, int]
  has_cls : bool = True

  @property
  def num_patch_tokens(self) -> int:
    return self.data.shape[1] - (1 if self.has_cls else 0)


def _block_shapes(prefix : str, width : int, mlp_width : int) -> typing.Dict[str, tuple]:
  return {
      f'{prefix}norm1.g': (width,),
      f'{prefix}norm1.b': (width,),
      f'{prefix}attn.qkv.w': (width, 3 * width),
      f'{prefix}attn.qkv.b': (3 * width,),
      f'{prefix}attn.proj.w': (width, width),
      f'{prefix}attn.proj.b': (width,),
      f'{prefix}norm2.g': (width,),
      f'{prefix}norm2.b': (width,),
      f'{prefix}mlp.fc1.w': (width, mlp_width),
      f'{prefix}mlp.fc1.b': (mlp_width,),
      f'{prefix}mlp.fc2.w': (mlp_width, width),
      f'{prefix}mlp.fc2.b': (width,),
  }


def block_prefix(index : int, scope : str = '') -> str:
  return f'{scope}blocks.{index:02d}.'


def param_shapes(cfg : ViTConfig, decoder : bool = True, head : bool = True,
                 probe_blocks : int = 0) -> typing.Dict[str, tuple]:
  """Name -> shape for every parameter of the requested parts."""
  d, k = cfg.width, cfg.patch_dim
  shapes = {
      'patch_embed.w': (k, d),
      'patch_embed.b': (d,),
      'cls_token': (d,),
      'norm.g': (d,),
      'norm.b': (d,),
  }
  for i in range(cfg.depth):
    shapes.update(_block_shapes(block_prefix(i), d, cfg.mlp_width))
  if decoder:
    dd = cfg.decoder_width
    shapes.update({
        'decoder.mask_token': (d,),
        'decoder.embed.w': (d, dd),
        'decoder.embed.b': (dd,),
        'decoder.norm.g': (dd,),
        'decoder.norm.b': (dd,),
        'decoder.pred.w': (dd, k),
        'decoder.pred.b': (k,),
    })
    for i in range(cfg.decoder_depth):
      shapes.update(_block_shapes(block_prefix(i, 'decoder.'), dd, cfg.decoder_mlp_width))
  if head:
    shapes.update({'head.w': (d, cfg.num_classes), 'head.b': (cfg.num_classes,)})
  for i in range(probe_blocks):
    shapes.update(_block_shapes(block_prefix(i, 'probe.'), d, cfg.mlp_width))
  return shapes


def _block_count(width : int, mlp_width : int) -> int:
  return 4 * width + (3 * width * width + 3 * width) + (width * width + width) \
      + (width * mlp_width + mlp_width) + (mlp_width * width + width)


def param_count(cfg : ViTConfig, decoder : bool = True, head : bool = True,
                probe_blocks : int = 0) -> int:
  """Closed-form parameter count of the requested parts."""
  d, k, dd = cfg.width, cfg.patch_dim, cfg.decoder_width
  n = (k * d + d) + d + 2 * d + cfg.depth * _block_count(d, cfg.mlp_width)
  if decoder:
    n += d + (d * dd + dd) + 2 * dd + (dd * k + k)
    n += cfg.decoder_depth * _block_count(dd, cfg.decoder_mlp_width)
  if head:
    n += d * cfg.num_classes + cfg.num_classes
  n += probe_blocks * _block_count(d, cfg.mlp_width)
  return n


def _init_value(name : str, shape : tuple, gen : np.random.Generator) -> np.ndarray:
  leaf = name.rsplit('.', 1)[-1]
  if name.endswith('_token'):
    return gen.normal(0.0, 0.02, size=shape)
  if leaf == 'g':
    return np.ones(shape)
  if leaf == 'b':
    return np.zeros(shape)
  # xavier uniform for every linear weight
  fan_in, fan_out = shape
  bound = math.sqrt(6.0 / (fan_in + fan_out))
  return gen.uniform(-bound, bound, size=shape)


def init_params(cfg : ViTConfig, rng : Rng, decoder : bool = True, head : bool = True,
                probe_blocks : int = 0) -> ParamSet:
  """Freshly initialized, trainable parameters.

  Every tensor draws from its own stream derived from its name, so adding a part (a head, probe
  blocks) leaves the other tensors' initial values unchanged.
  """
  cfg.validate()
  params = ParamSet()
  for name, shape in sorted(param_shapes(cfg, decoder, head, probe_blocks).items()):
    value = _init_value(name, shape, rng.derive(f'init:{name}').generator())
    params[name] = Tensor(value, requires_grad=True)
  return params


def init_probe_blocks(params : ParamSet, cfg : ViTConfig, blocks : int, rng : Rng) -> ParamSet:
  """Add `blocks` probe blocks whose residual branches start at zero (identity blocks)."""
  if blocks < 1:
    raise ValidationError(f'non-linear probing needs at least one inserted block, got {blocks}')
  for i in range(blocks):
    prefix = block_prefix(i, 'probe.')
    for name, shape in sorted(_block_shapes(prefix, cfg.width, cfg.mlp_width).items()):
      if name.endswith(('attn.proj.w', 'mlp.fc2.w')):
        value = np.zeros(shape)
      else:
        value = _init_value(name, shape, rng.derive(f'init:{name}').generator())
      params[name] = Tensor(value, requires_grad=True)
  return params


def _linear(x : Tensor, params : ParamSet, prefix : str) -> Tensor:
  return ops.add(ops.matmul(x, params[f'{prefix}.w']), params[f'{prefix}.b'])


def _dropout(x : Tensor, rate : float, rng : typing.Optional[Rng], tag : str) -> Tensor:
  if rng is None or rate <= 0.0:
    return x
  keep = rng.derive(tag).generator().random(x.shape) >= rate
  return ops.mul(x, (keep / (1.0 - rate)).astype(x.dtype))


def _drop_path(x : Tensor, rate : float, rng : typing.Optional[Rng], tag : str) -> Tensor:
  if rng is None or rate <= 0.0:
    return x
  keep = rng.derive(tag).generator().random((x.shape[0], 1, 1)) >= rate
  factor = np.broadcast_to(keep / (1.0 - rate), x.shape).astype(x.dtype)
  return ops.mul(x, factor)


def attention(x : Tensor, params : ParamSet, prefix : str, heads : int) -> Tensor:
  """Multi-head self-attention over the token axis of (B, T, D)."""
  b, t, d = x.shape
  dh = d // heads
  qkv = _linear(x, params, f'{prefix}attn.qkv')
  qkv = ops.permute(ops.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
  q, k, v = ops.getitem(qkv, 0), ops.getitem(qkv, 1), ops.getitem(qkv, 2)
  scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
  mixed = ops.matmul(ops.softmax(scores), v)
  mixed = ops.reshape(ops.permute(mixed, (0, 2, 1, 3)), (b, t, d))
  return _linear(mixed, params, f'{prefix}attn.proj')


def block(x : Tensor, params : ParamSet, prefix : str, heads : int, drop_rate : float = 0.0,
          drop_path : float = 0.0, rng : typing.Optional[Rng] = None) -> Tensor:
  """One pre-norm transformer block."""
  h = ops.layer_norm(x, params[f'{prefix}norm1.g'], params[f'{prefix}norm1.b'])
  h = _dropout(attention(h, params, prefix, heads), drop_rate, rng, f'{prefix}attn')
  x = ops.add(x, _drop_path(h, drop_path, rng, f'{prefix}path1'))
  h = ops.layer_norm(x, params[f'{prefix}norm2.g'], params[f'{prefix}norm2.b'])
  h = ops.gelu(_linear(h, params, f'{prefix}mlp.fc1'))
  h = _dropout(_linear(h, params, f'{prefix}mlp.fc2'), drop_rate, rng, f'{prefix}mlp')
  return ops.add(x, _drop_path(h, drop_path, rng, f'{prefix}path2'))


def visible_index(visible_mask : np.ndarray) -> np.ndarray:
  """(B, M) bool -> (B, V) grid positions of the visible tokens, ascending."""
  mask = np.asarray(visible_mask, dtype=bool)
  counts = mask.sum(axis=1)
  if mask.shape[0] and (counts != counts[0]).any():
    raise GeometryError(f'every sample of a batch must keep the same number of tokens, got '
                        f'{sorted(set(counts.tolist()))}')
  order = np.argsort(~mask, axis=1, kind='stable')
  return order[:, :counts[0] if mask.shape[0] else 0]


def embed_tokens(patches, visible_mask : np.ndarray, params : ParamSet,
                 cfg : ViTConfig) -> TokenBatch:
  """Project visible patches to tokens, add their position embeddings and prepend the class token.

  Params
  ------
  patches : Tensor or np.ndarray
      (B, M, 3P^2) patches of the full grid.
  visible_mask : np.ndarray
      (B, M) bool. Hidden tokens never enter the encoder.
  """
  data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
  if data.ndim != 3 or data.shape[1:] != (cfg.num_tokens, cfg.patch_dim):
    raise GeometryError(f'expected (B, {cfg.num_tokens}, {cfg.patch_dim}) patches, got '
                        f'{data.shape}')
  mask = np.asarray(visible_mask, dtype=bool)
  if mask.shape != data.shape[:2]:
    raise GeometryError(f'visible mask {mask.shape} does not match patches {data.shape[:2]}')
  b = data.shape[0]
  index = visible_index(mask)
  rows = np.arange(b)[:, None]
  source = patches if isinstance(patches, Tensor) else Tensor(data)
  picked = ops.getitem(source, (rows, index))
  tokens = _linear(picked, params, 'patch_embed')
  pos = sincos_pos_embed_array(cfg.grid, cfg.width)[index].astype(tokens.dtype)
  tokens = ops.add(tokens, pos)
  cls = ops.broadcast_to(ops.reshape(params['cls_token'], (1, cfg.width)), (b, 1, cfg.width))
  return TokenBatch(ops.concat([cls, tokens], axis=1), index, cfg.grid, True)


def encode(tb : TokenBatch, params : ParamSet, cfg : ViTConfig,
           rng : typing.Optional[Rng] = None) -> TokenBatch:
  """Run the encoder blocks and the final norm; dropout applies only when `rng` is given."""
  x = tb.data
  for i in range(cfg.depth):
    path = cfg.drop_path_rate * i / max(cfg.depth - 1, 1)
    x = block(x, params, block_prefix(i), cfg.heads, cfg.drop_rate, path, rng)
  x = ops.layer_norm(x, params['norm.g'], params['norm.b'])
  return attr.evolve(tb, data=x)


def insert_mask_tokens(tb : TokenBatch, params : ParamSet, cfg : ViTConfig) -> TokenBatch:
  """Fill every hidden grid slot with the mask token plus that slot's position embedding and
  restore grid order. The result has 1 + M tokens."""
  if tb.visible_index is None:
    return tb
  b, t, d = tb.data.shape
  m = cfg.num_tokens
  index = tb.visible_index
  v = index.shape[1]
  if t != 1 + v or (v and (index.min() < 0 or index.max() >= m)):
    raise GeometryError(f'{t} tokens do not match {v} visible indices on a {m}-token grid')
  hidden = np.stack([np.setdiff1d(np.arange(m), row, assume_unique=True) for row in index]) \
      if b else np.zeros((0, m - v), dtype=np.int64)
  if hidden.shape[1] != m - v:
    raise GeometryError('visible indices repeat a grid position')

  cls = ops.getitem(tb.data, (slice(None), slice(0, 1)))
  seq = ops.getitem(tb.data, (slice(None), slice(1, None)))
  if m > v:
    pos = sincos_pos_embed_array(cfg.grid, d)[hidden].astype(tb.data.dtype)
    token = ops.reshape(params['decoder.mask_token'], (d,))
    fill = ops.add(ops.broadcast_to(token, (b, m - v, d)), pos)
    seq = ops.concat([seq, fill], axis=1)
  order = np.concatenate([index, hidden], axis=1)
  restore = np.argsort(order, axis=1, kind='stable')
  seq = ops.getitem(seq, (np.arange(b)[:, None], restore))
  return TokenBatch(ops.concat([cls, seq], axis=1), None, tb.grid, True)


def decode(tb : TokenBatch, params : ParamSet, cfg : ViTConfig,
           rng : typing.Optional[Rng] = None) -> Tensor:
  """Decoder blocks over 1 + M tokens, then per-token projection to 3P^2 values.

  Returns
  -------
  Tensor :
      (B, M, 3P^2) predictions; the class token is dropped.
  """
  b, t, _ = tb.data.shape
  if tb.visible_index is not None or t != 1 + cfg.num_tokens:
    raise GeometryError(f'decode needs 1 + {cfg.num_tokens} tokens in grid order, got {t}')
  dd = cfg.decoder_width
  x = _linear(tb.data, params, 'decoder.embed')
  pos = np.concatenate([np.zeros((1, dd)), sincos_pos_embed_array(cfg.grid, dd)])
  x = ops.add(x, pos.astype(x.dtype))
  for i in range(cfg.decoder_depth):
    x = block(x, params, block_prefix(i, 'decoder.'), cfg.decoder_heads, cfg.drop_rate, 0.0,
              rng)
  x = ops.layer_norm(x, params['decoder.norm.g'], params['decoder.norm.b'])
  x = ops.getitem(x, (slice(None), slice(1, None)))
  return _linear(x, params, 'decoder.pred')


def classify_linear(tb : TokenBatch, params : ParamSet) -> Tensor:
  """(B, C) logits from a single linear layer on the class-token feature."""
  if not tb.has_cls:
    raise GeometryError('classify_linear needs the class token')
  return _linear(ops.getitem(tb.data, (slice(None), 0)), params, 'head')


def probe_nonlinear(tb : TokenBatch, blocks : int, params : ParamSet, cfg : ViTConfig) -> Tensor:
  """Run `blocks` inserted transformer blocks over the encoder output, then the linear head."""
  if blocks < 1:
    raise ValidationError(f'non-linear probing needs at least one inserted block, got {blocks}')
  x = tb.data
  for i in range(blocks):
    x = block(x, params, block_prefix(i, 'probe.'), cfg.heads)
  return classify_linear(attr.evolve(tb, data=x), params)


def forward_recovery(patches, visible_mask : np.ndarray, params : ParamSet, cfg : ViTConfig,
                     rng : typing.Optional[Rng] = None) -> Tensor:
  """embed -> encode -> insert mask tokens -> decode."""
  tb = encode(embed_tokens(patches, visible_mask, params, cfg), params, cfg, rng)
  return decode(insert_mask_tokens(tb, params, cfg), params, cfg, rng)
