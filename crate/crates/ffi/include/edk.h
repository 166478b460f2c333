#ifndef EDK_H
#define EDK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdkStatus {
  EDK_STATUS_OK = 0,
  EDK_STATUS_NULL_POINTER = 1,
  EDK_STATUS_CONFIG = 2,
  EDK_STATUS_DATA = 3,
  EDK_STATUS_NUMERIC = 4,
  EDK_STATUS_CHECKPOINT = 5,
  /**
   * An id is outside its field's vocabulary.
   */
  EDK_STATUS_LOOKUP = 6,
  /**
   * The output buffer has the wrong length.
   */
  EDK_STATUS_BUFFER_SIZE = 7,
  EDK_STATUS_INVALID_UTF8 = 8,
  EDK_STATUS_PANIC = 9,
} EdkStatus;

/**
 * Frozen knowledge base.
 */
typedef struct EdkKnowledgeBase EdkKnowledgeBase;

/**
 * Trained backbone.
 */
typedef struct EdkModel EdkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *edk_last_error(void);

/**
 * Loads a knowledge base checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum EdkStatus edk_kb_open(const char *path, struct EdkKnowledgeBase **out);

/**
 * # Safety
 * `kb` must come from [`edk_kb_open`] and not be used afterwards; null is ignored.
 */
void edk_kb_free(struct EdkKnowledgeBase *kb);

/**
 * Number of fields per instance; 0 for a null handle.
 *
 * # Safety
 * `kb` must be null or a live handle.
 */
size_t edk_kb_num_fields(const struct EdkKnowledgeBase *kb);

/**
 * # Safety
 * `kb` must be null or a live handle.
 */
size_t edk_kb_num_patterns(const struct EdkKnowledgeBase *kb);

/**
 * # Safety
 * `kb` must be null or a live handle.
 */
size_t edk_kb_knowledge_dim(const struct EdkKnowledgeBase *kb);

/**
 * Knowledge vectors `c` of `n` instances.
 *
 * `ids` holds `n * num_fields` ids, row-major; `out` receives
 * `n * knowledge_dim` values and `out_len` must equal that.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum EdkStatus edk_kb_query(const struct EdkKnowledgeBase *kb,
                            const uint32_t *ids,
                            size_t n,
                            double *out,
                            size_t out_len);

/**
 * Loads a trained model checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum EdkStatus edk_model_open(const char *path, struct EdkModel **out);

/**
 * # Safety
 * `model` must come from [`edk_model_open`] and not be used afterwards; null is ignored.
 */
void edk_model_free(struct EdkModel *model);

/**
 * Nonzero when the model must be given the knowledge base it was trained with.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t edk_model_uses_knowledge(const struct EdkModel *model);

/**
 * Click probabilities of `n` instances given as row-major ids.
 *
 * `kb` may be null for models trained without knowledge. Behavior
 * sequences are taken as empty.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum EdkStatus edk_model_predict(const struct EdkModel *model,
                                 const struct EdkKnowledgeBase *kb,
                                 const uint32_t *ids,
                                 size_t n,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDK_H */
