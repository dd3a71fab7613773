"""Progressive level-of-detail codec for volumetric video.

A video frame is a stack of multi-resolution feature grids rendered through a
shared decoder MLP. Frames are coded as per-level residuals against the
previous frame's reconstruction, quantized to 8-bit symbols and compressed by
a range coder driven by a learned entropy model. The resulting bitstream is
layered: any prefix of levels decodes to a coarser but valid video, so one
trained model serves many bitrates.
"""

from .container import (GoFBitstream, decode_gof, decoder_from_stream, encode_gof,
                        gof_from_fields, truncate_stream)
from .entropy import EntropyModel, build_coding_table
from .field import (GoF, HierarchicalField, LevelGrid, ResidualSet, make_bbox,
                    reconstruct_frame, sample_feature, grid_gradient_accumulate,
                    zero_field)
from .metrics import RDPoint, bd_metrics, psnr, ssim
from .quant import QuantizedLevel, dequantize, quantize, simulate_quantize
from .rangecoder import CodingTable, range_decode, range_encode
from .renderer import (Camera, DecoderNet, Ray, decode_point, render_image,
                       render_ray, render_rays)
from .scenes import (Dataset, SceneSpec, default_scene, generate_dataset,
                     load_dataset, orbit_rig, render_ground_truth)
from .streamsim import BandwidthTrace, SessionReport, select_level, simulate_session
from .trainer import (ReferenceBuffer, TrainConfig, TrainEventLog,
                      encode_trained_gof, loss_level, schedule_events,
                      train_frame, train_gof)

__version__ = "0.1.0"
