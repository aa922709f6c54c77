#pragma once

// Everything except image file I/O (image_io.hpp, data.hpp, config.hpp,
// train.hpp), which additionally needs OpenCV.
#include "artfix/artifacts.hpp"
#include "artfix/checkpoint.hpp"
#include "artfix/denoiser.hpp"
#include "artfix/diffusion.hpp"
#include "artfix/image.hpp"
#include "artfix/metrics.hpp"
#include "artfix/optim.hpp"
#include "artfix/random.hpp"
#include "artfix/sampler.hpp"
#include "artfix/tensor.hpp"
#include "artfix/textures.hpp"
