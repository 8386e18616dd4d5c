#pragma once

#include "fedp3e/datakit.hpp"
#include "fedp3e/fedcore.hpp"
#include "fedp3e/gmmproto.hpp"
#include "fedp3e/neuralnet.hpp"
#include "fedp3e/parallel.hpp"
#include "fedp3e/protoagg.hpp"
#include "fedp3e/random.hpp"
#include "fedp3e/runner.hpp"
#include "fedp3e/smoteaug.hpp"
#include "fedp3e/types.hpp"
