#ifndef PRESCRIBE_PRESCRIBE_HPP
#define PRESCRIBE_PRESCRIBE_HPP

/**
 * @file prescribe.hpp
 * @brief Umbrella header.
 */

#include "data.hpp"
#include "edistance.hpp"
#include "eval.hpp"
#include "io.hpp"
#include "niw.hpp"
#include "network.hpp"
#include "training.hpp"

#endif
