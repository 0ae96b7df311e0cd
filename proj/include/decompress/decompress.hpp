#pragma once

#include "decompress/adam.hpp"
#include "decompress/checkpoint.hpp"
#include "decompress/codec.hpp"
#include "decompress/conv.hpp"
#include "decompress/denoiser.hpp"
#include "decompress/entropy_model.hpp"
#include "decompress/errors.hpp"
#include "decompress/gdn.hpp"
#include "decompress/image.hpp"
#include "decompress/patches.hpp"
#include "decompress/rng.hpp"
#include "decompress/serialize.hpp"
#include "decompress/tensor.hpp"
#include "decompress/training.hpp"
#include "decompress/wavelet.hpp"
