#pragma once

#include "aga/autodiff.hpp"
#include "aga/binary_io.hpp"
#include "aga/config.hpp"
#include "aga/encoders.hpp"
#include "aga/evaluation.hpp"
#include "aga/gradcheck.hpp"
#include "aga/grouping.hpp"
#include "aga/losses.hpp"
#include "aga/model.hpp"
#include "aga/rng.hpp"
#include "aga/synth.hpp"
#include "aga/trainer.hpp"
#include "aga/verify.hpp"
