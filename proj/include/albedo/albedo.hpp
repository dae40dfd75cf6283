#pragma once

#include "albedo/adaptloop.hpp"
#include "albedo/checkpoint.hpp"
#include "albedo/classifier.hpp"
#include "albedo/config.hpp"
#include "albedo/dataset.hpp"
#include "albedo/diffusion.hpp"
#include "albedo/dpo.hpp"
#include "albedo/error.hpp"
#include "albedo/hash.hpp"
#include "albedo/image.hpp"
#include "albedo/label_store.hpp"
#include "albedo/labelserve.hpp"
#include "albedo/metrics.hpp"
#include "albedo/nn.hpp"
#include "albedo/png_io.hpp"
#include "albedo/pseudolabel.hpp"
#include "albedo/rng.hpp"
#include "albedo/synthgen.hpp"
#include "albedo/types.hpp"
