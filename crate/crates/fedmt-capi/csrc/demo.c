/*
 * Minimal C consumer of the fedmt ABI: builds projections, evaluates a
 * corrected loss against a hand-computed value, and checks error reporting.
 * Exits nonzero on the first mismatch.
 */

#include <math.h>
#include <stdio.h>
#include <string.h>

#include "fedmt.h"

static int check(FedmtStatus s, const char *what) {
  if (s != FEDMT_STATUS_OK) {
    char msg[256];
    fedmt_last_error(msg, sizeof msg);
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, msg);
    return 1;
  }
  return 0;
}

int main(void) {
  printf("fedmt %s\n", fedmt_version());

  /* Two coarse groups of two fine classes each. */
  size_t sizes[2] = {2, 2};
  FedmtProjection *q = NULL;
  if (check(fedmt_projection_hierarchical(sizes, 2, &q), "hierarchical"))
    return 1;
  if (fedmt_projection_rows(q) != 2 || fedmt_projection_cols(q) != 4) {
    fprintf(stderr, "unexpected projection shape\n");
    return 1;
  }

  /* The 4x2 pseudo-inverse spreads each coarse class uniformly over its
     group of two, so every nonzero entry is exactly 0.5. */
  double pinv[8];
  if (check(fedmt_projection_pinv(q, pinv, 8), "pinv"))
    return 1;
  const double want_pinv[8] = {0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5};
  for (int i = 0; i < 8; i++) {
    if (pinv[i] != want_pinv[i]) {
      fprintf(stderr, "pinv[%d] = %g, want %g\n", i, pinv[i], want_pinv[i]);
      return 1;
    }
  }

  /* Uniform logits put probability 0.5 on either group, so the projected
     cross-entropy is ln 2 regardless of the observed coarse label. */
  const double logits[4] = {0.0, 0.0, 0.0, 0.0};
  const size_t label[1] = {0};
  double loss = -1.0;
  double grad[4];
  if (check(fedmt_loss_eval(FEDMT_LOSS_KIND_FORWARD_CE, q, logits, 1, 4, label,
                            FEDMT_LABEL_SPACE_OTHER, 2, &loss, grad, 4),
            "loss_eval"))
    return 1;
  if (fabs(loss - log(2.0)) > 1e-12) {
    fprintf(stderr, "forward CE on uniform logits = %.17g, want ln 2\n", loss);
    return 1;
  }

  /* The noise matrix with xi = (K-1)/K is singular and must say so. */
  FedmtProjection *t = NULL;
  FedmtStatus s = fedmt_projection_noise(2, 0.5, &t);
  if (s != FEDMT_STATUS_SINGULAR_NOISE || t != NULL) {
    fprintf(stderr, "singular noise returned status %d\n", (int)s);
    return 1;
  }
  char msg[256];
  if (fedmt_last_error(msg, sizeof msg) == 0) {
    fprintf(stderr, "singular noise left no error message\n");
    return 1;
  }

  fedmt_projection_free(q);
  printf("ok\n");
  return 0;
}
