#pragma once

#include "boundary.hpp"
#include "chunkers.hpp"
#include "document.hpp"
#include "embedding.hpp"
#include "error.hpp"
#include "evalmetrics.hpp"
#include "jats.hpp"
#include "pairgen.hpp"
#include "parallel.hpp"
#include "retrieval.hpp"
#include "segmenter.hpp"
