"""Online blind super-resolution with learned degradation estimation."""

from .autodiff import (Adam, AdamState, NonFiniteError, Tensor, adam_step,
                       bce_with_logits, bicubic_resample, conv2d, l1_loss,
                       leaky_relu, mean, no_grad)
from .degradation import (DegradationSpec, GdNet, Kernel2D, degrade,
                          effective_kernel, gaussian_kernel, gd_forward,
                          gd_init, kernel_correlation, synth_kernel)
from .imaging import (ImageBuf, ImageIOError, Rng, UnsupportedFormatError,
                      load_png, psnr, sample_patches, save_png, ssim)
from .models import (DlConfig, GrConfig, ModelFormatError, ModelParams,
                     dl_forward, gr_forward, init_params, load_params,
                     save_params)
from .trainer import (AdaptResult, ExternalPool, NumericalAbort, Session,
                      TrainConfig, gan_losses, loss_eb, loss_ib,
                      nonblind_adapt, online_adapt, pretrain_gr)

__version__ = "0.1.0"
